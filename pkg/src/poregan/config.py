"""Pipeline configuration: one human-editable YAML file, validated and normalized.

Every section has defaults; values left at their default are echoed in the
normalized dump together with the source of the number.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .core import ValidationError
from .cgan.networks import ARCHITECTURES


class ConfigError(ValidationError):
    """Aggregated configuration problems; ``errors`` lists each one."""

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.errors))


# Core-sample table: depth (m), porosity (fraction), permeability (mD).
CORE_SAMPLES = [
    {"index": 0, "depth_m": 1879.50, "core_porosity": 0.1573, "core_permeability": 33.64},
    {"index": 1, "depth_m": 1881.90, "core_porosity": 0.2477, "core_permeability": 181.44},
    {"index": 2, "depth_m": 1918.50, "core_porosity": 0.1058, "core_permeability": 13.39},
    {"index": 3, "depth_m": 1943.50, "core_porosity": 0.1332, "core_permeability": 12.09},
]

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "run": {"profile": "full", "seed": 0, "pixel_size": 1.0},
    "paths": {"root": "poregan_run", "image_dir": None},
    "data": {
        "source": "synthetic",
        "n_depths": 4,
        "per_depth_count": 30,
        "porosity_ranges": [[0.05, 0.30]],
        "image_shape": [960, 1280],
        "rev_sizes": None,
        "patch_size": None,
        "stride": None,
        "sigma_threshold": 0.06,
        "n_classes": 10,
        "target_per_class": 160,
        "min_class_size": 20,
        "drift_tolerance": 0.01,
    },
    "segmentation": {
        "epochs": 10,
        "batch_size": 8,
        "lr": 1e-3,
        "base_filters": 32,
        "n_images": 200,
        "tile": 96,
        "dice_floor": 0.95,
    },
    "gan": {
        "arch": "original",
        "toy": False,
        "batch_norm": True,
        "condition_gain": 20.0,
        "epochs": 200,
        "batch_size": 16,
        "lr_start": 2e-4,
        "lr_end": 2e-6,
        "beta1": 0.5,
        "beta2": 0.999,
        "checkpoint_every": 10,
        "probes_per_depth": 8,
    },
    "petro": {
        "w_porosity": 0.5,
        "w_permeability": 0.5,
        "n_real": 50,
        "n_candidates": 100,
        "n_probes": 100,
    },
    "depths": CORE_SAMPLES,
}

# Where each default comes from; echoed next to defaulted values in the dump.
SOURCES = {
    "data.sigma_threshold": "porosity std 0.06 marks the representative patch size",
    "data.n_classes": "ten equal-width porosity classes per depth",
    "data.target_per_class": "160 images per porosity class",
    "data.min_class_size": "classes with fewer than 20 images are excluded",
    "data.drift_tolerance": "augmentation must keep porosity within 0.01",
    "segmentation.dice_floor": "labeler Dice of 0.952 on held-out data",
    "gan.epochs": "200 training epochs",
    "gan.batch_size": "batch of 16, split 8 real / 8 generated",
    "gan.lr_start": "Adam learning rate 2e-4 decayed linearly",
    "gan.lr_end": "final learning rate 2e-6",
    "gan.beta1": "Adam beta1 0.5",
    "gan.beta2": "Adam beta2 0.999",
    "petro.w_porosity": "equal porosity/permeability weights of 0.5",
    "petro.w_permeability": "equal porosity/permeability weights of 0.5",
    "petro.n_candidates": "100 generated candidates per depth",
    "petro.n_real": "50 random real sub-images per depth",
    "petro.n_probes": "100 porosity-control probes",
    "depths": "core-sample porosity and permeability at the four sampled depths",
}

PROFILES = ("full", "toy")

TOY_OVERRIDES = {
    "run": {"profile": "toy"},
    "data": {"n_depths": 2, "per_depth_count": 30, "porosity_ranges": [[0.2, 0.4], [0.12, 0.32]],
             "image_shape": [172, 256], "rev_sizes": [16, 24, 32, 48, 64, 96, 128],
             "patch_size": 96, "stride": 32, "target_per_class": 80, "min_class_size": 10},
    "segmentation": {"epochs": 6, "base_filters": 16, "n_images": 250},
    "gan": {"toy": True, "epochs": 30},
    "depths": [{"index": 0, "depth_m": None, "core_porosity": None, "core_permeability": None},
               {"index": 1, "depth_m": None, "core_porosity": None, "core_permeability": None}],
}


@dataclass
class PipelineConfig:
    """Normalized configuration.  Section dicts hold plain values only."""

    run: Dict[str, Any]
    paths: Dict[str, Any]
    data: Dict[str, Any]
    segmentation: Dict[str, Any]
    gan: Dict[str, Any]
    petro: Dict[str, Any]
    depths: List[Dict[str, Any]]
    base_dir: Path = field(default_factory=Path.cwd)
    defaulted: List[str] = field(default_factory=list)

    SECTIONS = ("run", "paths", "data", "segmentation", "gan", "petro", "depths")

    def as_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.SECTIONS}

    @property
    def hash(self) -> str:
        """Short digest of the normalized values.

        The output root is left out so that the same experiment run in two
        directories carries the same hash; input paths are resolved first.
        """
        payload = self.as_dict()
        payload["paths"] = {k: (str(self.resolve(v)) if v else None)
                            for k, v in payload["paths"].items() if k != "root"}
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @property
    def seed(self) -> int:
        return int(self.run["seed"])

    @property
    def n_depths(self) -> int:
        return len(self.depths)

    def resolve(self, p) -> Path:
        p = Path(p).expanduser()
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def root(self) -> Path:
        return self.resolve(self.paths["root"])

    def with_overrides(self, overrides: Dict[str, Any]) -> "PipelineConfig":
        """Apply ``{"section.key": value}`` overrides and re-validate."""
        raw = self.as_dict()
        defaulted = list(self.defaulted)
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, _, key = dotted.partition(".")
            if section == "depths":
                raw["depths"] = value
            else:
                raw.setdefault(section, {})[key] = value
            if dotted in defaulted:
                defaulted.remove(dotted)
        out = normalize(raw, self.base_dir)
        out.defaulted = defaulted
        return out

    def _source_note(self, dotted: str, value) -> Optional[str]:
        if dotted not in self.defaulted or dotted not in SOURCES:
            return None
        if dotted == "depths":
            return SOURCES[dotted] if value == CORE_SAMPLES else None
        section, key = dotted.split(".")
        return SOURCES[dotted] if DEFAULTS[section][key] == value else None

    def dump(self) -> str:
        """YAML text with the source of each defaulted value as a trailing comment."""
        lines = [f"# config hash: {self.hash}"]
        for section in self.SECTIONS:
            values = getattr(self, section)
            if section == "depths":
                note = self._source_note("depths", values)
                lines.append("depths:" + (f"  # default: {note}" if note else ""))
                for row in values:
                    lines.append("  - " + _yaml_scalar(row))
                continue
            lines.append(f"{section}:")
            for key, value in values.items():
                dotted = f"{section}.{key}"
                text = f"  {key}: {_yaml_scalar(value)}"
                note = self._source_note(dotted, value)
                if note:
                    text += f"  # default: {note}"
                lines.append(text)
        return "\n".join(lines) + "\n"


def _yaml_scalar(value) -> str:
    """One-line YAML for a value; floats keep a form YAML reads back as float."""
    text = yaml.safe_dump(value, default_flow_style=True, sort_keys=False, width=10 ** 6)
    return text.strip().removesuffix("...").strip()


def _merge(base, update):
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check(errors: List[str], cond: bool, msg: str):
    if not cond:
        errors.append(msg)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def normalize(raw: Optional[dict], base_dir=None, toy: bool = False) -> PipelineConfig:
    """Fill defaults, check ranges and return a :class:`PipelineConfig`.

    ``run.profile: toy`` (or ``toy=True``) swaps in the desk-scale defaults:
    two synthetic depths, 96 px patches and the reduced generator.

    Raises
    ------
    ConfigError
        With every problem found, not only the first.
    """
    raw = {} if raw is None else raw
    errors: List[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be a mapping of sections"])
    run_given = raw.get("run") if isinstance(raw.get("run"), dict) else {}
    profile = run_given.get("profile", "toy" if toy else "full")
    if profile not in PROFILES:
        errors.append(f"run.profile must be one of {list(PROFILES)}")
        profile = "full"
    defaults = _merge(DEFAULTS, TOY_OVERRIDES) if profile == "toy" else copy.deepcopy(DEFAULTS)
    merged = copy.deepcopy(defaults)
    defaulted = []
    for section in raw:
        if section not in DEFAULTS:
            errors.append(f"unknown section '{section}'")
    for section, dflt in defaults.items():
        given = raw.get(section)
        if section == "depths":
            if given is None:
                defaulted.append("depths")
            elif not isinstance(given, list) or not given:
                errors.append("depths must be a non-empty list")
            else:
                merged["depths"] = copy.deepcopy(given)
            continue
        if given is None:
            given = {}
        if not isinstance(given, dict):
            errors.append(f"section '{section}' must be a mapping")
            given = {}
        for key in given:
            if key not in dflt:
                errors.append(f"unknown key '{section}.{key}'")
        for key in dflt:
            if key in given:
                merged[section][key] = given[key]
            else:
                defaulted.append(f"{section}.{key}")

    _validate_values(merged, errors)
    if errors:
        raise ConfigError(errors)
    return PipelineConfig(**{k: merged[k] for k in PipelineConfig.SECTIONS},
                          base_dir=Path(base_dir) if base_dir else Path.cwd(),
                          defaulted=defaulted)


def _validate_values(c: dict, errors: List[str]):
    r, d, s, g, p = c["run"], c["data"], c["segmentation"], c["gan"], c["petro"]
    _check(errors, _is_int(r["seed"]) and r["seed"] >= 0, "run.seed must be a non-negative integer")
    _check(errors, _is_num(r["pixel_size"]) and r["pixel_size"] > 0, "run.pixel_size must be > 0")

    _check(errors, d["source"] in ("synthetic", "images"), "data.source must be 'synthetic' or 'images'")
    for key in ("n_depths", "per_depth_count", "n_classes", "target_per_class", "min_class_size"):
        _check(errors, _is_int(d[key]) and d[key] >= 1, f"data.{key} must be a positive integer")
    if _is_int(d["min_class_size"]) and _is_int(d["target_per_class"]):
        _check(errors, d["min_class_size"] <= d["target_per_class"],
               "data.min_class_size must not exceed data.target_per_class")
    _check(errors, _is_num(d["sigma_threshold"]) and 0 < d["sigma_threshold"] < 1,
           "data.sigma_threshold must lie in (0, 1)")
    _check(errors, _is_num(d["drift_tolerance"]) and 0 <= d["drift_tolerance"] < 1,
           "data.drift_tolerance must lie in [0, 1)")
    for key in ("patch_size", "stride"):
        v = d[key]
        _check(errors, v is None or (_is_int(v) and v >= 1), f"data.{key} must be null or a positive integer")
    shape = d["image_shape"]
    _check(errors, isinstance(shape, list) and len(shape) == 2 and all(_is_int(v) and v > 0 for v in shape),
           "data.image_shape must be [height, width]")
    ranges = d["porosity_ranges"]
    ok = isinstance(ranges, list) and ranges and all(
        isinstance(x, list) and len(x) == 2 and all(_is_num(v) for v in x) and 0 < x[0] < x[1] < 1
        for x in ranges)
    _check(errors, bool(ok), "data.porosity_ranges must be a list of [low, high] pairs with 0 < low < high < 1")
    if ok and _is_int(d["n_depths"]):
        _check(errors, len(ranges) in (1, d["n_depths"]),
               "data.porosity_ranges needs one pair or one pair per depth")
    sizes = d["rev_sizes"]
    _check(errors, sizes is None or (isinstance(sizes, list) and all(_is_int(v) and v > 1 for v in sizes)),
           "data.rev_sizes must be null or a list of integers > 1")

    for key in ("epochs", "batch_size", "base_filters", "n_images", "tile"):
        _check(errors, _is_int(s[key]) and s[key] >= 1, f"segmentation.{key} must be a positive integer")
    _check(errors, _is_num(s["lr"]) and s["lr"] > 0, "segmentation.lr must be > 0")
    _check(errors, _is_num(s["dice_floor"]) and 0 <= s["dice_floor"] <= 1,
           "segmentation.dice_floor must lie in [0, 1]")

    _check(errors, g["arch"] in ARCHITECTURES, f"gan.arch must be one of {list(ARCHITECTURES)}")
    _check(errors, isinstance(g["toy"], bool), "gan.toy must be true or false")
    _check(errors, isinstance(g["batch_norm"], bool), "gan.batch_norm must be true or false")
    _check(errors, _is_num(g["condition_gain"]) and g["condition_gain"] > 0,
           "gan.condition_gain must be > 0")
    _check(errors, _is_int(g["epochs"]) and g["epochs"] >= 1, "gan.epochs must be a positive integer")
    bs = g["batch_size"]
    if not (_is_int(bs) and bs >= 2):
        errors.append("gan.batch_size must be an integer >= 2")
    elif bs % 2:
        errors.append(f"gan.batch_size must be even (each step uses batch/2 real and batch/2 "
                      f"generated images), got {bs}")
    for key in ("lr_start", "lr_end"):
        _check(errors, _is_num(g[key]) and g[key] > 0, f"gan.{key} must be > 0")
    for key in ("beta1", "beta2"):
        _check(errors, _is_num(g[key]) and 0 <= g[key] < 1, f"gan.{key} must lie in [0, 1)")
    for key in ("checkpoint_every", "probes_per_depth"):
        _check(errors, _is_int(g[key]) and g[key] >= 0, f"gan.{key} must be a non-negative integer")

    wp, wk = p["w_porosity"], p["w_permeability"]
    if _is_num(wp) and _is_num(wk):
        _check(errors, wp >= 0 and wk >= 0, "petro weights must be non-negative")
        _check(errors, abs(wp + wk - 1.0) <= 1e-9,
               f"petro.w_porosity + petro.w_permeability must equal 1, got {wp + wk:g}")
    else:
        errors.append("petro weights must be numbers")
    _check(errors, _is_int(p["n_real"]) and p["n_real"] >= 10, "petro.n_real must be an integer >= 10")
    _check(errors, _is_int(p["n_candidates"]) and p["n_candidates"] >= 100,
           "petro.n_candidates must be an integer >= 100")
    _check(errors, _is_int(p["n_probes"]) and p["n_probes"] >= 2, "petro.n_probes must be an integer >= 2")

    rows = c["depths"]
    if isinstance(rows, list) and rows:
        keys = {"index", "depth_m", "core_porosity", "core_permeability"}
        for i, row in enumerate(rows):
            if not isinstance(row, dict):
                errors.append(f"depths[{i}] must be a mapping")
                continue
            extra = set(row) - keys
            if extra:
                errors.append(f"depths[{i}] has unknown keys {sorted(extra)}")
            _check(errors, row.get("index") == i,
                   f"depths[{i}].index must be {i} (indices are contiguous from 0)")
            phi = row.get("core_porosity")
            _check(errors, phi is None or (_is_num(phi) and 0 < phi < 1),
                   f"depths[{i}].core_porosity must be null or in (0, 1)")
            k = row.get("core_permeability")
            _check(errors, k is None or (_is_num(k) and k > 0),
                   f"depths[{i}].core_permeability must be null or > 0")
        if _is_int(d["n_depths"]) and d["source"] == "synthetic":
            _check(errors, len(rows) == d["n_depths"],
                   f"depths lists {len(rows)} rows but data.n_depths is {d['n_depths']}")


def validate_config(path=None, toy: bool = False) -> PipelineConfig:
    """Load a YAML file (or nothing, for all defaults) and normalize it.

    Relative paths inside the file resolve against the file's directory, and
    ``paths.image_dir`` must exist when given.
    """
    raw, base = {}, Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError([f"config file {path} does not exist"])
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as err:
            raise ConfigError([f"cannot parse {path}: {err}"]) from err
        base = path.resolve().parent
    cfg = normalize(raw, base, toy=toy)
    errors = []
    img = cfg.paths.get("image_dir")
    if img is not None and not cfg.resolve(img).is_dir():
        errors.append(f"paths.image_dir {cfg.resolve(img)} is not a directory")
    if cfg.data["source"] == "images" and img is None:
        errors.append("data.source 'images' needs paths.image_dir")
    root_parent = cfg.root.parent
    if not root_parent.exists():
        errors.append(f"parent of paths.root ({root_parent}) does not exist")
    if errors:
        raise ConfigError(errors)
    return cfg
