"""Stage orchestration: artifacts on disk, prerequisites, run log.

Each stage reads its inputs from the run directory (``paths.root``), writes
its outputs atomically, and appends one line to ``run_log.jsonl``. Every
JSON/CSV/PNG/checkpoint artifact carries the config hash.
"""
from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
import math
import os
import subprocess
import time
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from . import __version__, plotting
from .cgan import ConditionalGAN, GanTrainConfig, preset
from .config import PipelineConfig
from .core import (DepthLabel, DivergenceError, StateError, ValidationError, porosity_of_mask,
                   read_mask, read_rgb, write_mask, write_rgb)
from .dataprep import (DatasetManifest, TextureParams, balance_dataset, build_class_scheme,
                       classify_records, extract_patches, label_patches, load_manifest,
                       rev_analysis, save_manifest, select_patch_size, synthesize_corpus,
                       write_corpus)
from .morphology import analyze
from .petro import (PetroTargets, default_probes, dual_constraint_error, image_properties,
                    mask_properties, permeability, porosity_control_report,
                    representativeness_study)
from .segmentation import (Segmenter, SegmentationNetSpec, SegTrainConfig, evaluate_segmenter,
                           train_segmenter)
from .stats import compare

log = logging.getLogger(__name__)

DEVICE_ENV = "POREGAN_DEVICE"
MORPH_METRICS = ("porosity", "avg_pore_radius", "specific_surface_area", "tortuosity",
                 "weighted_throat_radius")


class MissingPrerequisite(StateError):
    """A stage input is absent; ``stage`` names the stage that produces it."""

    def __init__(self, artifact, stage: str):
        self.artifact, self.stage = Path(artifact), stage
        super().__init__(f"missing {self.artifact}; run the '{stage}' stage first")


def select_device() -> str:
    """``POREGAN_DEVICE`` (cpu, cuda, cuda:N or auto); auto picks CUDA when present."""
    want = os.environ.get(DEVICE_ENV, "auto").strip().lower()
    if want == "auto":
        return "cuda" if torch.cuda.is_available() else "cpu"
    if want.startswith("cuda") and not torch.cuda.is_available():
        raise ValidationError(f"{DEVICE_ENV}={want} but CUDA is not available")
    if want != "cpu" and not want.startswith("cuda"):
        raise ValidationError(f"{DEVICE_ENV} must be cpu, cuda, cuda:N or auto, got {want!r}")
    return want


def code_version() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True,
                             timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ---------------------------------------------------------------------------
# artifact writers


def _atomic_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


class Stage:
    """Context for one stage run: config, paths and artifact bookkeeping."""

    def __init__(self, name: str, cfg: PipelineConfig):
        self.name, self.cfg = name, cfg
        self.hash = cfg.hash
        self.root = cfg.root
        self.artifacts: List[str] = []
        self.device = select_device()

    @property
    def meta(self) -> dict:
        return {"config_hash": self.hash, "stage": self.name}

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def write_json(self, rel, payload: dict) -> Path:
        p = self.path(rel)
        blob = {"config_hash": self.hash, "stage": self.name}
        blob.update(_jsonable(payload))
        _atomic_text(p, json.dumps(blob, indent=2, allow_nan=False))
        self.artifacts.append(str(rel))
        return p

    def write_csv(self, rel, rows: List[dict], columns: Optional[List[str]] = None) -> Path:
        p = self.path(rel)
        rows = list(rows)
        columns = list(columns or (rows[0].keys() if rows else [])) + ["config_hash"]
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_name(p.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=columns)
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(v) for k, v in dict(r, config_hash=self.hash).items()})
        tmp.replace(p)
        self.artifacts.append(str(rel))
        return p

    def plot(self, fn: Callable, rel, *args, **kw) -> Path:
        p = fn(*args, path=self.path(rel), metadata=self.meta, **kw)
        self.artifacts.append(str(rel))
        return p

    def require(self, rel, producer: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise MissingPrerequisite(p, producer)
        return p


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "nan"
    return v


# ---------------------------------------------------------------------------
# shared loaders

CORPUS_JSON = Path("corpus") / "corpus.json"
SEGMENTER = Path("segmenter") / "segmenter.pt"
REV_JSON = Path("rev") / "rev.json"
INITIAL_MANIFEST = Path("patches") / "manifest.json"
BALANCED_MANIFEST = Path("dataset") / "manifest.json"


def gan_checkpoint(cfg: PipelineConfig) -> Path:
    return Path("gan") / cfg.gan["arch"] / "generator.pt"


def _load_corpus(st: Stage, with_images: bool = True):
    blob = json.loads(st.require(CORPUS_JSON, "prep-synth").read_text())
    items = blob["items"]
    if with_images:
        for it in items:
            it["image"] = read_rgb(st.root / "corpus" / it["path"])
            it["mask"] = read_mask(st.root / "corpus" / it["mask"]) if it.get("mask") else None
    return items, blob


def _load_segmenter(st: Stage) -> Segmenter:
    return Segmenter.load(st.require(SEGMENTER, "seg-train"), device=st.device)


def _load_gan(st: Stage) -> ConditionalGAN:
    return ConditionalGAN.load(st.require(gan_checkpoint(st.cfg), "gan-train"), device=st.device)


def _seg_porosity_fn(seg: Segmenter):
    return lambda im: porosity_of_mask(seg.segment(im))


def resolve_targets(st: Stage, seg: Optional[Segmenter] = None) -> Dict[int, PetroTargets]:
    """Core targets per depth: from the depth table, or derived from the source corpus.

    A null core porosity is replaced by the bulk porosity of that depth's
    source images; a null core permeability by the permeability model
    evaluated at that porosity and the median throat radius of the sources.
    """
    rows = st.cfg.depths
    if all(r.get("core_porosity") is not None and r.get("core_permeability") is not None
           for r in rows):
        return {r["index"]: PetroTargets(DepthLabel(r["index"], len(rows)), r["core_porosity"], r["core_permeability"],
                                         r.get("depth_m")) for r in rows}
    items, _ = _load_corpus(st)
    out = {}
    for r in rows:
        d = r["index"]
        masks = []
        for it in items:
            if it["depth_index"] != d:
                continue
            if it["mask"] is not None:
                masks.append(it["mask"])
            else:
                seg = seg or _load_segmenter(st)
                masks.append(seg.segment(it["image"]))
        if not masks:
            raise ValidationError(f"no source images at depth {d} to derive targets from")
        phi = r.get("core_porosity")
        if phi is None:
            phi = float(np.mean([m.mean() for m in masks]))
        k = r.get("core_permeability")
        if k is None:
            radii = [mask_properties(m, st.cfg.run["pixel_size"]).throat_radius for m in masks]
            k = permeability(phi, float(np.median(radii)))
        out[d] = PetroTargets(DepthLabel(d, len(rows)), float(phi), float(k), r.get("depth_m"))
    return out


# ---------------------------------------------------------------------------
# stages


def stage_prep_synth(st: Stage, **_):
    """Write the source corpus: synthetic images and masks, or an index of user images."""
    cfg, d = st.cfg, st.cfg.data
    items = []
    if d["source"] == "synthetic":
        ranges = d["porosity_ranges"]
        corpus = synthesize_corpus(cfg.n_depths, d["per_depth_count"],
                                   ranges[0] if len(ranges) == 1 else ranges,
                                   TextureParams(), tuple(d["image_shape"]), seed=cfg.seed)
        counters = {}
        for img, mask, dep, phi in zip(corpus.images, corpus.masks, corpus.depths,
                                       corpus.target_porosities):
            k = counters.get(dep, 0)
            counters[dep] = k + 1
            rel = f"depth_{dep}/image_{k:04d}.png"
            mrel = f"depth_{dep}/image_{k:04d}_mask.png"
            write_rgb(st.path("corpus", rel), img, st.meta)
            write_mask(st.path("corpus", mrel), mask, st.meta)
            items.append({"path": rel, "mask": mrel, "depth_index": dep,
                          "target_porosity": phi, "porosity": porosity_of_mask(mask)})
    else:
        src = cfg.resolve(cfg.paths["image_dir"])
        for dep in range(cfg.n_depths):
            folder = src / f"depth_{dep}"
            files = sorted(p for p in folder.glob("*.png") if not p.stem.endswith("_mask"))
            if not files:
                raise ValidationError(f"no PNG images in {folder}")
            for k, f in enumerate(files):
                rel = f"depth_{dep}/image_{k:04d}.png"
                write_rgb(st.path("corpus", rel), read_rgb(f), st.meta)
                item = {"path": rel, "mask": None, "depth_index": dep, "source": str(f)}
                mfile = f.with_name(f.stem + "_mask.png")
                if mfile.exists():
                    m = read_mask(mfile)
                    item["mask"] = f"depth_{dep}/image_{k:04d}_mask.png"
                    item["porosity"] = porosity_of_mask(m)
                    write_mask(st.path("corpus", item["mask"]), m, st.meta)
                items.append(item)
    st.write_json(CORPUS_JSON, {"n_depths": cfg.n_depths, "source": d["source"], "items": items})
    return {"n_images": len(items)}


def _seg_tiles(st: Stage):
    items, _ = _load_corpus(st)
    tile = st.cfg.segmentation["tile"]
    imgs, masks = [], []
    for it in items:
        if it["mask"] is None:
            continue
        imgs += extract_patches(it["image"], tile, tile // 2)
        masks += extract_patches(it["mask"], tile, tile // 2)
    if not imgs:
        raise MissingPrerequisite(st.path("corpus", "depth_0", "*_mask.png"), "prep-synth")
    imgs, masks = np.stack(imgs), np.stack(masks)
    rng = np.random.default_rng(st.cfg.seed)
    n = min(st.cfg.segmentation["n_images"], len(imgs))
    sel = rng.choice(len(imgs), n, replace=False)
    n_test = max(2, n // 5)
    return (imgs[sel[n_test:]], masks[sel[n_test:]]), (imgs[sel[:n_test]], masks[sel[:n_test]])


def stage_seg_train(st: Stage, **_):
    s = st.cfg.segmentation
    (x, y), (xt, yt) = _seg_tiles(st)
    config = SegTrainConfig(epochs=s["epochs"], batch_size=s["batch_size"], learning_rate=s["lr"],
                            train_fraction=0.85, val_fraction=0.15, test_fraction=0.0,
                            seed=st.cfg.seed)
    seg, metrics = train_segmenter(x, y, config, SegmentationNetSpec(base_filters=s["base_filters"]),
                                   device=st.device, test_images=xt, test_masks=yt)
    p = st.path(SEGMENTER)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + ".tmp")
    seg.save(tmp, extra=st.meta)
    tmp.replace(p)
    st.artifacts.append(str(SEGMENTER))
    ok = metrics.dice >= s["dice_floor"]
    if not ok:
        log.warning("segmenter Dice %.3f is below the floor %.3f", metrics.dice, s["dice_floor"])
    st.write_json("segmenter/metrics.json", {"test": metrics.to_dict(), "n_train": len(x),
                                             "n_test": len(xt), "dice_floor": s["dice_floor"],
                                             "meets_floor": ok})
    return {"dice": metrics.dice, "porosity_mae": metrics.porosity_mae}


def stage_seg_eval(st: Stage, **_):
    seg = _load_segmenter(st)
    _, (xt, yt) = _seg_tiles(st)
    metrics = evaluate_segmenter(seg, xt, yt)
    st.write_json("segmenter/eval.json", {"test": metrics.to_dict()})
    return {"dice": metrics.dice}


def stage_seg_apply(st: Stage, input=None, output=None, **_):
    """Segment every PNG in ``input`` into ``output`` (default: run dir / masks)."""
    if input is None:
        raise ValidationError("seg-apply needs --input DIR")
    seg = _load_segmenter(st)
    src = Path(input)
    files = sorted(src.glob("*.png"))
    if not files:
        raise ValidationError(f"no PNG images in {src}")
    out = Path(output) if output else st.path("masks")
    rows = []
    for f in files:
        m = seg.segment(read_rgb(f))
        write_mask(out / f"{f.stem}_mask.png", m, st.meta)
        rows.append({"file": f.name, "porosity": porosity_of_mask(m)})
    st.write_csv(out / "porosity.csv", rows)
    return {"n_images": len(rows)}


def _rev_sizes(cfg: PipelineConfig, items) -> List[int]:
    sizes = cfg.data["rev_sizes"]
    if sizes:
        return sorted(sizes)
    smallest = min(min(it["image"].shape[:2]) for it in items)
    base = [16, 24, 32, 48, 64, 96, 128, 192, 256, 320, 384, 480, 640, 800, 960]
    return [s for s in base if s <= smallest]


def stage_prep_rev(st: Stage, **_):
    seg = _load_segmenter(st)
    items, _ = _load_corpus(st)
    curve = rev_analysis([it["image"] for it in items], seg, _rev_sizes(st.cfg, items),
                         [it["depth_index"] for it in items], seed=st.cfg.seed)
    thr = st.cfg.data["sigma_threshold"]
    size, fallback = select_patch_size(curve, thr)
    if fallback:
        log.warning("no window size reaches sigma <= %.3f; using the largest (%d)", thr, size)
    st.write_csv("rev/rev.csv", list(curve.to_rows()))
    st.write_json(REV_JSON, {"sizes": curve.sizes, "sigma": curve.sigma, "mean": curve.mean,
                             "skipped": curve.skipped, "threshold": thr,
                             "selected_size": size, "fallback": fallback})
    st.plot(plotting.plot_rev, "rev/rev.png", curve, threshold=thr, chosen=size)
    return {"selected_size": size, "fallback": fallback}


def _patch_size(st: Stage) -> int:
    size = st.cfg.data["patch_size"]
    if size is None:
        size = json.loads(st.require(REV_JSON, "prep-rev").read_text())["selected_size"]
    return int(size)


def stage_prep_extract(st: Stage, **_):
    seg = _load_segmenter(st)
    items, _ = _load_corpus(st)
    size = _patch_size(st)
    stride = st.cfg.data["stride"] or size
    records = []
    for k, it in enumerate(items):
        patches = extract_patches(it["image"], size, stride)
        records += label_patches(patches, DepthLabel(it["depth_index"], st.cfg.n_depths), seg,
                                 f"{it['path']}")
    if not records:
        raise ValidationError(f"no {size}px patches fit in the corpus images")
    por = {d: [r.porosity for r in records if r.depth.index == d] for d in range(st.cfg.n_depths)}
    scheme = build_class_scheme(por, st.cfg.data["n_classes"])
    classify_records(records, scheme)
    man = DatasetManifest(records, scheme, st.cfg.data["target_per_class"],
                          st.cfg.data["min_class_size"])
    write_corpus(man, st.path("patches"), st.meta)
    save_manifest(man, st.path("patches", "manifest.csv"), st.path(INITIAL_MANIFEST),
                  {"config_hash": st.hash, "patch_size": size, "stride": stride})
    st.artifacts += ["patches/manifest.csv", str(INITIAL_MANIFEST)]
    return {"n_patches": len(records), "patch_size": size}


def stage_prep_balance(st: Stage, **_):
    seg = _load_segmenter(st)
    man = load_manifest(st.require(INITIAL_MANIFEST, "prep-extract"))
    before = man.counts()
    bal = balance_dataset(man, st.cfg.data["target_per_class"], st.cfg.data["min_class_size"],
                          seed=st.cfg.seed, porosity_fn=_seg_porosity_fn(seg),
                          drift_tol=st.cfg.data["drift_tolerance"])
    write_corpus(bal, st.path("dataset"), st.meta)
    save_manifest(bal, st.path("dataset", "manifest.csv"), st.path(BALANCED_MANIFEST),
                  {"config_hash": st.hash})
    st.artifacts += ["dataset/manifest.csv", str(BALANCED_MANIFEST)]
    st.plot(plotting.plot_class_counts, "dataset/class_counts.png", before, bal.counts())
    return {"n_records": len(bal.records), "n_cells": len(bal.counts()),
            "n_excluded": len(bal.excluded)}


def _gan_specs(cfg: PipelineConfig):
    g, d = preset(cfg.gan["arch"], cfg.n_depths, cfg.gan["toy"])
    g.batch_norm = cfg.gan["batch_norm"]
    g.condition_gain = d.condition_gain = float(cfg.gan["condition_gain"])
    return g, d


def stage_gan_train(st: Stage, **_):
    cfg, c = st.cfg, st.cfg.gan
    man = load_manifest(st.require(BALANCED_MANIFEST, "prep-balance"))
    seg = _load_segmenter(st)
    g_spec, d_spec = _gan_specs(cfg)
    present = set(man.depths)
    if present != set(range(cfg.n_depths)):
        raise ValidationError(f"balanced manifest covers depths {sorted(present)}, "
                              f"expected 0..{cfg.n_depths - 1}")
    images = np.stack([r.load_image() for r in man.records])
    if images.shape[1] != g_spec.output_size:
        raise ValidationError(f"patches are {images.shape[1]}px but the '{c['arch']}' generator "
                              f"emits {g_spec.output_size}px; set data.patch_size or gan.toy")
    train_cfg = GanTrainConfig(epochs=c["epochs"], batch_size=c["batch_size"], beta1=c["beta1"],
                               beta2=c["beta2"], lr_start=c["lr_start"], lr_end=c["lr_end"],
                               seed=cfg.seed, checkpoint_every=c["checkpoint_every"],
                               probes_per_depth=c["probes_per_depth"])
    ckpt_dir = st.path("gan", c["arch"])
    last = ckpt_dir / "last.pt"
    model = None
    if last.exists():
        prev = ConditionalGAN.load(last, device=st.device)
        if prev.extra.get("config_hash") == st.hash:
            log.info("resuming from %s at epoch %d", last, prev.epoch)
            model = prev
    if model is None:
        torch.manual_seed(cfg.seed)
        model = ConditionalGAN(g_spec, d_spec, train_cfg, device=st.device)
        if man.scheme is not None:
            for (d, k) in man.excluded:
                model.excluded_ranges.setdefault(d, []).append(man.scheme.class_range(d, k))
    model.extra.update(st.meta)
    model.fit(images, [r.porosity for r in man.records], [r.depth.index for r in man.records],
              porosity_fn=_seg_porosity_fn(seg), checkpoint_dir=ckpt_dir)
    # with probes enabled the exported generator is the epoch with the best probe R2
    final = model
    best = ckpt_dir / "best.pt"
    if c["probes_per_depth"] > 0 and best.exists():
        cand = ConditionalGAN.load(best, device=st.device)
        if cand.extra.get("config_hash") == st.hash:
            final = cand
    out = st.path(gan_checkpoint(cfg))
    final.save(out)
    st.artifacts.append(str(gan_checkpoint(cfg)))
    rel = Path("gan") / c["arch"]
    st.write_csv(rel / "training_log.csv", model.log.rows)
    st.plot(plotting.plot_training, rel / "training.png", model.log)
    st.write_json(rel / "training.json", {
        "arch": c["arch"], "toy": c["toy"], "epochs": model.epoch, "steps": model.step_count,
        "selected_epoch": final.epoch, "trained_ranges": model.trained_ranges, "excluded_ranges": model.excluded_ranges,
        "final": model.log.rows[-1] if model.log.rows else {}})
    return {"epochs": model.epoch, "selected_epoch": final.epoch,
            "final_loss_d": model.log.rows[-1]["loss_d"],
            "final_loss_g": model.log.rows[-1]["loss_g"]}


def stage_gan_generate(st: Stage, phi=None, depth=None, n=1, seed=None, **_):
    if phi is None or depth is None:
        raise ValidationError("gan-generate needs --phi and --depth")
    model = _load_gan(st)
    seed = st.cfg.seed if seed is None else seed
    batch = model.generate(float(phi), int(depth), int(n), seed=int(seed))
    seg = Segmenter.load(st.path(SEGMENTER), device=st.device) if st.path(SEGMENTER).exists() else None
    rel = Path("generated") / f"depth_{int(depth)}_phi_{float(phi):.4f}_seed_{int(seed)}"
    rows = []
    for k, im in enumerate(batch.images):
        u8 = np.clip(np.rint((im + 1.0) * 127.5), 0, 255).astype(np.uint8)
        name = f"image_{k:04d}.png"
        write_rgb(st.path(rel, name), u8, dict(st.meta, porosity=phi, depth=depth, seed=seed))
        row = {"file": name, "target_porosity": float(phi), "depth_index": int(depth),
               "seed": int(seed), "index": k, "out_of_range": batch.out_of_range}
        if seg is not None:
            row["porosity"] = seg.porosity(im)
        rows.append(row)
    st.write_csv(rel / "images.csv", rows)
    return {"n": len(rows), "out_of_range": batch.out_of_range, "dir": str(st.path(rel))}


def stage_petro_report(st: Stage, **_):
    """Porosity control: probes across the trained ranges, R2 and per-depth MAE."""
    model = _load_gan(st)
    seg = _load_segmenter(st)
    probes = default_probes(model.trained_ranges, st.cfg.petro["n_probes"], seed=st.cfg.seed,
                            excluded=model.excluded_ranges)
    rep = porosity_control_report(model, seg, probes, seed=st.cfg.seed)
    st.write_csv("reports/porosity_control.csv", list(rep.scatter_rows()))
    st.write_json("reports/porosity_control.json", rep.to_dict())
    st.plot(plotting.plot_porosity_control, "reports/porosity_control.png", rep)
    if model.log.rows:
        st.plot(plotting.plot_training, "reports/training.png", model.log)
    summary = _summary(st)
    summary["porosity_control"] = rep.to_dict()
    st.write_json("reports/report.json", summary)
    return {"r2": rep.r2, "mae_by_depth": rep.mae_by_depth}


def _read_json(p: Path):
    return json.loads(p.read_text()) if p.exists() else None


def _summary(st: Stage) -> dict:
    out = {"version": code_version(), "seed": st.cfg.seed}
    for key, rel in (("segmenter", "segmenter/metrics.json"), ("rev", REV_JSON),
                     ("training", Path("gan") / st.cfg.gan["arch"] / "training.json"),
                     ("morphology", "reports/morphology.json"),
                     ("representativeness", "reports/representativeness.json")):
        blob = _read_json(st.path(rel))
        if blob is not None:
            for drop in ("rows", "items"):
                blob.pop(drop, None)
            out[key] = blob
    man = _read_json(st.path(BALANCED_MANIFEST))
    if man is not None:
        out["dataset"] = {"counts": man["counts"], "excluded": man["excluded"]}
    return out


def _morph_values(masks, pixel_size) -> Dict[str, List[float]]:
    vals = {k: [] for k in MORPH_METRICS}
    for m in masks:
        s = analyze(m, pixel_size)
        for k in MORPH_METRICS:
            vals[k].append(float(getattr(s, k)))
    return vals


def stage_morph_analyze(st: Stage, input=None, **_):
    """Morphology of real vs generated patches per depth, or of the PNGs in ``input``."""
    px = st.cfg.run["pixel_size"]
    if input is not None:
        files = sorted(Path(input).glob("*.png"))
        if not files:
            raise ValidationError(f"no PNG images in {input}")
        seg = None
        rows = []
        for f in files:
            arr = read_rgb(f)
            if f.stem.endswith("_mask") or np.all(arr == arr[..., :1]):
                mask = read_mask(f)
            else:
                seg = seg or _load_segmenter(st)
                mask = seg.segment(arr)
            rows.append(dict(file=f.name, **analyze(mask, px).to_dict()))
        st.write_csv("reports/morphology_input.csv", rows)
        return {"n_images": len(rows)}
    model = _load_gan(st)
    seg = _load_segmenter(st)
    man = load_manifest(st.require(BALANCED_MANIFEST, "prep-balance"))
    rng = np.random.default_rng(st.cfg.seed)
    n = st.cfg.petro["n_real"]
    rows, per_depth, real_all, gen_all = [], {}, {}, {}
    for d in man.depths:
        recs = [r for r in man.records if r.depth.index == d and not r.augmented]
        pick = rng.choice(len(recs), min(n, len(recs)), replace=False)
        real_imgs = [recs[i].load_image() for i in pick]
        phis = [recs[i].porosity for i in pick]
        gen_imgs = [model.generate(phi, d, 1, seed=st.cfg.seed + 7919 * d + k,
                                   check_range=False).images[0] for k, phi in enumerate(phis)]
        real = _morph_values([seg.segment(im) for im in real_imgs], px)
        gen = _morph_values([seg.segment(im) for im in gen_imgs], px)
        per_depth[d] = {}
        for k in MORPH_METRICS:
            a = [v for v in real[k] if math.isfinite(v)]
            b = [v for v in gen[k] if math.isfinite(v)]
            row = {"depth_index": d, "metric": k, "real_n": len(a), "generated_n": len(b),
                   "real_mean": float(np.mean(a)) if a else math.nan,
                   "real_std": float(np.std(a, ddof=1)) if len(a) > 1 else math.nan,
                   "generated_mean": float(np.mean(b)) if b else math.nan,
                   "generated_std": float(np.std(b, ddof=1)) if len(b) > 1 else math.nan}
            if len(a) >= 2 and len(b) >= 2:
                row.update(compare(a, b).to_dict())
            rows.append(row)
            per_depth[d][k] = row
            real_all.setdefault(k, []).extend(a)
            gen_all.setdefault(k, []).extend(b)
    st.write_csv("reports/morphology.csv", rows,
                 ["depth_index", "metric", "real_n", "generated_n", "real_mean", "real_std",
                  "generated_mean", "generated_std", "ks_statistic", "ks_p", "t_statistic",
                  "t_p", "cohens_d", "effect", "ks_marker", "t_marker"])
    st.write_json("reports/morphology.json", {"by_depth": per_depth})
    labels = {}
    for k in MORPH_METRICS:
        if len(real_all[k]) >= 2 and len(gen_all[k]) >= 2:
            r = compare(real_all[k], gen_all[k])
            labels[k] = f"d={r.cohens_d:.2f} ({r.effect}), KS {r.ks_marker}"
    st.plot(plotting.plot_morphology_panels, "reports/morphology.png", real_all, gen_all,
            labels=labels)
    return {"n_rows": len(rows)}


def stage_petro_score(st: Stage, input=None, depth=None, **_):
    """Dual-constraint error of every PNG in ``input`` against one depth's targets."""
    if input is None or depth is None:
        raise ValidationError("petro-score needs --input DIR and --depth")
    seg = _load_segmenter(st)
    targets = resolve_targets(st, seg)
    if int(depth) not in targets:
        raise ValidationError(f"depth {depth} is not in the depth table")
    tgt = targets[int(depth)]
    files = sorted(Path(input).glob("*.png"))
    if not files:
        raise ValidationError(f"no PNG images in {input}")
    w = st.cfg.petro
    rows = []
    for f in files:
        p = image_properties(read_rgb(f), seg, st.cfg.run["pixel_size"])
        s = dual_constraint_error((p.porosity, p.permeability), tgt, w["w_porosity"],
                                  w["w_permeability"])
        rows.append({"file": f.name, "porosity": p.porosity, "throat_radius": p.throat_radius,
                     "permeability": p.permeability, "E": s.E,
                     "porosity_term": s.porosity_term, "permeability_term": s.permeability_term})
    st.write_csv(f"reports/scores_depth_{int(depth)}.csv", rows)
    best = min(range(len(rows)), key=lambda i: rows[i]["E"])
    return {"n_images": len(rows), "best": rows[best]["file"], "best_E": rows[best]["E"]}


def stage_petro_select(st: Stage, **_):
    model = _load_gan(st)
    seg = _load_segmenter(st)
    targets = resolve_targets(st, seg)
    items, _ = _load_corpus(st)
    real = {d: [it["image"] for it in items if it["depth_index"] == d] for d in targets}
    w = st.cfg.petro
    rep = representativeness_study(real, model, targets, seg, n_real=w["n_real"],
                                   n_candidates=w["n_candidates"],
                                   pixel_size=st.cfg.run["pixel_size"], seed=st.cfg.seed,
                                   w_porosity=w["w_porosity"], w_permeability=w["w_permeability"])
    st.write_csv("reports/representativeness.csv", rep.table())
    st.write_json("reports/representativeness.json", {
        "rows": rep.table(), "targets": {d: asdict(t) for d, t in targets.items()},
        "weights": [w["w_porosity"], w["w_permeability"]]})
    dist_rows = []
    for d, cohorts in rep.distributions.items():
        for name, vals in cohorts.items():
            for phi, k, e in vals:
                dist_rows.append({"depth_index": d, "cohort": name, "porosity": phi,
                                  "permeability": k, "E": e})
    st.write_csv("reports/representativeness_scores.csv", dist_rows)
    st.plot(plotting.plot_representativeness, "reports/representativeness.png", rep)
    for d, imgs in rep.selected_images.items():
        for k, im in enumerate(imgs):
            u8 = np.clip(np.rint((im + 1.0) * 127.5), 0, 255).astype(np.uint8)
            rel = Path("reports") / "selected" / f"depth_{d}_{k}.png"
            write_rgb(st.path(rel), u8, st.meta)
            st.artifacts.append(str(rel))
    return {d: {"real_E": r.real.error, "generated_E": r.generated.error}
            for d, r in ((r.depth_index, r) for r in rep.rows)}


STAGES: Dict[str, Callable] = {
    "prep-synth": stage_prep_synth,
    "seg-train": stage_seg_train,
    "seg-eval": stage_seg_eval,
    "seg-apply": stage_seg_apply,
    "prep-rev": stage_prep_rev,
    "prep-extract": stage_prep_extract,
    "prep-balance": stage_prep_balance,
    "gan-train": stage_gan_train,
    "gan-generate": stage_gan_generate,
    "morph-analyze": stage_morph_analyze,
    "petro-score": stage_petro_score,
    "petro-select": stage_petro_select,
    "petro-report": stage_petro_report,
}

ALIASES = {"prep": ["prep-synth"], "evaluate": ["petro-report"], "select": ["petro-select"]}

DEFAULT_SEQUENCE = ["prep-synth", "seg-train", "prep-rev", "prep-extract", "prep-balance",
                    "gan-train", "petro-report", "morph-analyze", "petro-select"]


def expand_stages(names: Optional[List[str]]) -> List[str]:
    if not names:
        return list(DEFAULT_SEQUENCE)
    out = []
    for n in names:
        if n in ALIASES:
            out += ALIASES[n]
        elif n in STAGES:
            out.append(n)
        else:
            raise ValidationError(f"unknown stage {n!r}; choose from "
                                  f"{sorted(STAGES) + sorted(ALIASES)}")
    return out


def _append_run_log(root: Path, entry: dict):
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "run_log.jsonl", "a") as fh:
        fh.write(json.dumps(_jsonable(entry)) + "\n")


def run_stage(name: str, cfg: PipelineConfig, **options) -> dict:
    """Run one stage and record it in the run log.

    Returns the stage summary. Errors propagate after a failed run-log entry
    is written: :class:`MissingPrerequisite`, :class:`ValidationError` or
    :class:`DivergenceError`.
    """
    if name not in STAGES:
        raise ValidationError(f"unknown stage {name!r}")
    st = Stage(name, cfg)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    entry = {"stage": name, "config_hash": st.hash, "seed": cfg.seed, "version": code_version(),
             "started": started, "device": st.device}
    np.random.seed(cfg.seed % 2 ** 32)
    torch.manual_seed(cfg.seed)
    try:
        summary = STAGES[name](st, **options) or {}
    except (MissingPrerequisite, ValidationError, DivergenceError) as err:
        entry.update(status="failed", error=str(err), wall_seconds=time.perf_counter() - t0)
        _append_run_log(cfg.root, entry)
        raise
    entry.update(status="ok", wall_seconds=round(time.perf_counter() - t0, 3),
                 artifacts=st.artifacts, summary=summary)
    _append_run_log(cfg.root, entry)
    return summary
