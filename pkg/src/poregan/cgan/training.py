"""Adversarial training loop, learning-rate schedule, generation and checkpoints."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from ..core import (ConditionVector, DepthLabel, DivergenceError, StateError, ValidationError,
                    to_network_domain)
from .losses import discriminator_loss_from_logits, generator_loss_from_logits
from .networks import Discriminator, DiscriminatorSpec, Generator, GeneratorSpec

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "poregan-cgan"
CHECKPOINT_VERSION = 1


@dataclass
class GanTrainConfig:
    epochs: int = 200
    batch_size: int = 16
    beta1: float = 0.5
    beta2: float = 0.999
    lr_start: float = 2.0e-4
    lr_end: float = 2.0e-6
    decay_power: float = 1.0
    seed: int = 0
    checkpoint_every: int = 10
    probes_per_depth: int = 8

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValidationError("batch_size must be even (half real, half generated)")
        if self.epochs < 1:
            raise ValidationError("epochs must be positive")
        if not self.lr_start > self.lr_end > 0:
            raise ValidationError("learning rate must decay from lr_start to a positive lr_end")


def lr_schedule(epoch: int, config: GanTrainConfig) -> float:
    """Polynomial decay from ``lr_start`` at epoch 0 to ``lr_end`` at ``epochs``."""
    if not 0 <= epoch <= config.epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {config.epochs}]")
    frac = 1.0 - epoch / config.epochs
    return (config.lr_start - config.lr_end) * frac ** config.decay_power + config.lr_end


@dataclass
class TrainingLog:
    rows: List[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, key):
        return [r.get(key) for r in self.rows]

    def to_csv(self, path):
        if not self.rows:
            return
        keys = list(dict.fromkeys(k for r in self.rows for k in r))
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(self.rows)


@dataclass
class GeneratedBatch:
    images: np.ndarray            # (n, S, S, 3) in [-1, 1]
    porosity: float
    depth: int
    out_of_range: bool = False

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(self.images)


class ConditionalGAN:
    """Generator/discriminator pair with its optimizers and random state.

    All randomness used by training (batch order, latent noise, condition
    sampling) flows from one ``torch.Generator`` so a run is reproducible
    from its seed and resumable from a checkpoint.
    """

    def __init__(self, gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec,
                 config: Optional[GanTrainConfig] = None, device: str = "cpu"):
        if gen_spec.n_depths != disc_spec.n_depths:
            raise ValidationError("generator and discriminator disagree on n_depths")
        if gen_spec.output_size != disc_spec.image_size:
            raise ValidationError("generator output size does not match discriminator input")
        self.gen_spec, self.disc_spec = gen_spec, disc_spec
        self.config = config or GanTrainConfig()
        self.device = torch.device(device)
        torch.manual_seed(self.config.seed)
        self.G = Generator(gen_spec).to(self.device)
        self.D = Discriminator(disc_spec).to(self.device)
        c = self.config
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=c.lr_start, betas=(c.beta1, c.beta2))
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=c.lr_start, betas=(c.beta1, c.beta2))
        self.rng = torch.Generator().manual_seed(c.seed)
        self.step_count = 0
        self.epoch = 0
        self.log = TrainingLog()
        self.trained = False
        # depth -> (lo, hi) porosity seen in training, plus excluded class bins
        self.trained_ranges: Dict[int, Tuple[float, float]] = {}
        self.excluded_ranges: Dict[int, List[Tuple[float, float]]] = {}
        self.extra: dict = {}
        self.best_probe_score = math.inf     # lower is better: -R2, or MAE

    @property
    def n_depths(self) -> int:
        return self.gen_spec.n_depths

    @property
    def image_size(self) -> int:
        return self.gen_spec.output_size

    # sampling ------------------------------------------------------------

    def _latent(self, n):
        return torch.rand(n, self.gen_spec.latent_dim, generator=self.rng).to(self.device)

    def _one_hot(self, depth_idx: torch.Tensor):
        return torch.nn.functional.one_hot(depth_idx.long(), self.n_depths).float()

    # training ------------------------------------------------------------

    def set_lr(self, lr: float):
        for opt in (self.opt_g, self.opt_d):
            for g in opt.param_groups:
                g["lr"] = lr

    def train_step(self, real: torch.Tensor, phi: torch.Tensor, depth: torch.Tensor,
                   cond_pool: Tuple[torch.Tensor, torch.Tensor]) -> Tuple[float, float]:
        """One discriminator update on m/2 real + m/2 fake, then one generator update on m.

        ``real`` holds m/2 network-domain images with their porosity and depth
        index; ``cond_pool`` is the empirical (porosity, depth) table from
        which the generator update draws its m conditions.
        """
        half = real.shape[0]
        m = 2 * half
        self.G.train()
        self.D.train()
        onehot = self._one_hot(depth).to(self.device)
        real, phi = real.to(self.device), phi.to(self.device)
        fake = self.G(self._latent(half), phi, onehot).detach()
        loss_d = discriminator_loss_from_logits(self.D(real, phi, onehot), self.D(fake, phi, onehot))
        self.opt_d.zero_grad()
        loss_d.backward()
        self.opt_d.step()

        pool_phi, pool_depth = cond_pool
        pick = torch.randint(len(pool_phi), (m,), generator=self.rng)
        g_phi = pool_phi[pick].to(self.device)
        g_onehot = self._one_hot(pool_depth[pick]).to(self.device)
        loss_g = generator_loss_from_logits(self.D(self.G(self._latent(m), g_phi, g_onehot),
                                                   g_phi, g_onehot))
        self.opt_g.zero_grad()
        loss_g.backward()
        self.opt_g.step()
        self.step_count += 1
        ld, lg = loss_d.item(), loss_g.item()
        if not (math.isfinite(ld) and math.isfinite(lg)):
            raise DivergenceError(f"non-finite loss at step {self.step_count}", self.step_count)
        return ld, lg

    def fit(self, images: np.ndarray, porosity: Sequence[float], depth: Sequence[int],
            epochs: Optional[int] = None, porosity_fn: Optional[Callable] = None,
            probe_targets: Optional[Dict[int, Sequence[float]]] = None,
            checkpoint_dir=None, on_epoch: Optional[Callable] = None) -> TrainingLog:
        """Run epochs up to ``epochs`` (default: config.epochs), continuing from ``self.epoch``.

        ``images`` is an ``(N, S, S, 3)`` stack in uint8 or network domain.
        ``porosity_fn`` maps one network-domain image to its porosity and
        enables probe tracking: after each epoch ``probes_per_depth`` images
        are generated per depth, cycling over ``probe_targets`` (default: an
        evenly spaced grid inside each depth's training porosity range). The
        checkpoint with the highest probe R2 is kept as "best"; with a single
        distinct target the lowest mean absolute error is used instead.
        """
        c = self.config
        stop = c.epochs if epochs is None else min(epochs, c.epochs)
        x = torch.from_numpy(_to_chw(images))
        phi = torch.as_tensor(np.asarray(porosity, dtype=np.float32))
        dep = torch.as_tensor(np.asarray(depth, dtype=np.int64))
        if not len(x) == len(phi) == len(dep):
            raise ValidationError("images, porosity and depth must align")
        if int(dep.max()) >= self.n_depths or int(dep.min()) < 0:
            raise ValidationError("depth index outside the generator's depth range")
        if x.shape[-1] != self.image_size:
            raise ValidationError(f"training images must be {self.image_size}px")
        half = c.batch_size // 2
        n_batches = len(x) // half
        if n_batches < 1:
            raise ValidationError("fewer training images than half a batch")
        for d in range(self.n_depths):
            sel = phi[dep == d]
            if len(sel):
                lo, hi = float(sel.min()), float(sel.max())
                old = self.trained_ranges.get(d)
                self.trained_ranges[d] = (lo, hi) if old is None else (min(lo, old[0]), max(hi, old[1]))
        if probe_targets is None:
            n_grid = max(c.probes_per_depth, 1)
            probe_targets = {d: [float(t) for t in np.linspace(*self.trained_ranges[d], n_grid + 2)[1:-1]]
                             for d in range(self.n_depths) if (dep == d).any()}
        ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
        while self.epoch < stop:
            lr = lr_schedule(self.epoch, c)
            self.set_lr(lr)
            t0 = time.perf_counter()
            order = torch.randperm(len(x), generator=self.rng)
            ld_sum = lg_sum = 0.0
            for b in range(n_batches):
                idx = order[b * half:(b + 1) * half]
                try:
                    ld, lg = self.train_step(x[idx], phi[idx], dep[idx], (phi, dep))
                except DivergenceError as err:
                    last = ckpt_dir / "last.pt" if ckpt_dir else None
                    err.checkpoint = last if last and last.exists() else None
                    raise
                ld_sum += ld
                lg_sum += lg
            self.epoch += 1
            self.trained = True
            row = {"epoch": self.epoch, "loss_d": ld_sum / n_batches,
                   "loss_g": lg_sum / n_batches, "lr": lr,
                   "seconds": round(time.perf_counter() - t0, 3)}
            improved = False
            if porosity_fn is not None and c.probes_per_depth > 0:
                all_t, all_o = [], []
                for d, targets in sorted(probe_targets.items()):
                    targets = np.atleast_1d(np.asarray(targets, dtype=float))
                    n = max(c.probes_per_depth, len(targets))
                    obs = []
                    for k in range(n):
                        t = float(targets[k % len(targets)])
                        im = self._sample(t, d, 1, 10_000 + 100 * d + k)[0]
                        obs.append(porosity_fn(im))
                        all_t.append(t)
                    all_o += obs
                    # the median target is tracked in the log for plotting
                    mid = len(targets) // 2
                    row[f"probe_target_{d}"] = float(targets[mid])
                    row[f"probe_porosity_{d}"] = float(np.mean(obs[mid::len(targets)]))
                t_arr, o_arr = np.asarray(all_t), np.asarray(all_o)
                row["probe_error"] = float(np.mean(np.abs(o_arr - t_arr)))
                ss_tot = float(np.sum((t_arr - t_arr.mean()) ** 2))
                if ss_tot > 0:
                    row["probe_r2"] = 1.0 - float(np.sum((o_arr - t_arr) ** 2)) / ss_tot
                    score = -row["probe_r2"]
                else:
                    score = row["probe_error"]
                if score < self.best_probe_score:
                    self.best_probe_score = score
                    improved = True
            self.log.rows.append(row)
            log.info("epoch %d/%d loss_d=%.4f loss_g=%.4f", self.epoch, c.epochs,
                     row["loss_d"], row["loss_g"])
            if ckpt_dir is not None:
                ckpt_dir.mkdir(parents=True, exist_ok=True)
                self.save(ckpt_dir / "last.pt")
                if c.checkpoint_every and self.epoch % c.checkpoint_every == 0:
                    self.save(ckpt_dir / f"epoch_{self.epoch:04d}.pt")
                if improved:
                    self.save(ckpt_dir / "best.pt")
            if on_epoch is not None:
                on_epoch(self, row)
        self.trained = True
        return self.log

    # generation ----------------------------------------------------------

    def in_trained_range(self, porosity: float, depth: int) -> bool:
        rng = self.trained_ranges.get(depth)
        if rng is None or not rng[0] <= porosity <= rng[1]:
            return False
        return not any(lo <= porosity < hi for lo, hi in self.excluded_ranges.get(depth, []))

    @torch.no_grad()
    def generate(self, porosity: float, depth, n: int = 1, seed: int = 0,
                 check_range: bool = True) -> GeneratedBatch:
        """``n`` images at the requested condition, deterministic in ``seed``."""
        if not self.trained:
            raise StateError("generator has not been trained or loaded")
        d = depth.index if isinstance(depth, DepthLabel) else int(depth)
        ConditionVector(porosity, DepthLabel(d, self.n_depths))
        imgs = self._sample(porosity, d, n, seed)
        flag = check_range and not self.in_trained_range(porosity, d)
        if flag:
            log.warning("porosity %.4f at depth %d is outside the trained range", porosity, d)
        return GeneratedBatch(imgs, float(porosity), d, flag)

    @torch.no_grad()
    def _sample(self, porosity: float, d: int, n: int, seed: int) -> np.ndarray:
        g = torch.Generator().manual_seed(int(seed))
        z = torch.rand(n, self.gen_spec.latent_dim, generator=g).to(self.device)
        phi = torch.full((n,), float(porosity), device=self.device)
        onehot = self._one_hot(torch.full((n,), d)).to(self.device)
        self.G.eval()
        out = []
        for i in range(0, n, 32):
            out.append(self.G(z[i:i + 32], phi[i:i + 32], onehot[i:i + 32]).cpu())
        return torch.cat(out).permute(0, 2, 3, 1).numpy()

    # persistence ---------------------------------------------------------

    def state(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "gen_spec": self.gen_spec.to_dict(), "disc_spec": self.disc_spec.to_dict(),
            "config": asdict(self.config), "epoch": self.epoch, "step": self.step_count,
            "G": self.G.state_dict(), "D": self.D.state_dict(),
            "opt_g": self.opt_g.state_dict(), "opt_d": self.opt_d.state_dict(),
            "rng": self.rng.get_state(), "torch_rng": torch.get_rng_state(),
            "log": self.log.rows, "trained": self.trained,
            "trained_ranges": self.trained_ranges, "excluded_ranges": self.excluded_ranges,
            "best_probe_score": self.best_probe_score,
        }

    def save(self, path, extra: Optional[dict] = None) -> None:
        blob = self.state()
        blob["extra"] = dict(self.extra, **(extra or {}))
        tmp = Path(str(path) + ".tmp")
        torch.save(blob, tmp)
        tmp.replace(path)

    @classmethod
    def load(cls, path, device: str = "cpu") -> "ConditionalGAN":
        blob = torch.load(path, map_location=device, weights_only=False)
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise ValidationError(f"{path} is not a cGAN checkpoint")
        if blob.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported cGAN checkpoint version {blob.get('version')}")
        model = cls(GeneratorSpec(**blob["gen_spec"]), DiscriminatorSpec(**blob["disc_spec"]),
                    GanTrainConfig(**blob["config"]), device=device)
        model.G.load_state_dict(blob["G"])
        model.D.load_state_dict(blob["D"])
        model.opt_g.load_state_dict(blob["opt_g"])
        model.opt_d.load_state_dict(blob["opt_d"])
        model.rng.set_state(blob["rng"])
        torch.set_rng_state(blob["torch_rng"])
        model.epoch, model.step_count = blob["epoch"], blob["step"]
        model.log = TrainingLog(list(blob["log"]))
        model.trained = blob["trained"]
        model.trained_ranges = {int(k): tuple(v) for k, v in blob["trained_ranges"].items()}
        model.excluded_ranges = {int(k): [tuple(r) for r in v]
                                 for k, v in blob["excluded_ranges"].items()}
        model.extra = blob.get("extra", {})
        model.best_probe_score = blob.get("best_probe_score", math.inf)
        return model


def _to_chw(images) -> np.ndarray:
    arr = np.asarray(images)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValidationError("expected an (N, S, S, 3) image stack")
    if arr.dtype == np.uint8:
        arr = to_network_domain(arr)
    return np.ascontiguousarray(arr.astype(np.float32).transpose(0, 3, 1, 2))


def train(manifest, gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec,
          config: Optional[GanTrainConfig] = None, porosity_fn=None, checkpoint_dir=None,
          device: str = "cpu") -> Tuple[ConditionalGAN, TrainingLog]:
    """Train on a balanced manifest covering every depth (all depths in one model)."""
    recs = manifest.records
    if not recs:
        raise ValidationError("empty manifest")
    present = {r.depth.index for r in recs}
    if present != set(range(gen_spec.n_depths)):
        raise ValidationError(f"manifest covers depths {sorted(present)}, "
                              f"generator expects 0..{gen_spec.n_depths - 1}")
    model = ConditionalGAN(gen_spec, disc_spec, config, device=device)
    if manifest.scheme is not None:
        for (d, k) in manifest.excluded:
            if d in manifest.scheme.edges:
                model.excluded_ranges.setdefault(d, []).append(manifest.scheme.class_range(d, k))
    images = np.stack([r.load_image() for r in recs])
    model.fit(images, [r.porosity for r in recs], [r.depth.index for r in recs],
              porosity_fn=porosity_fn, checkpoint_dir=checkpoint_dir)
    return model, model.log
