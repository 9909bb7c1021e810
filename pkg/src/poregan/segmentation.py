"""Attention U-Net pore/solid segmenter.

The network binarizes RGB patches into pore masks. It is used twice: to
label training patches with porosity, and to measure the porosity of
generated images.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (StateError, ValidationError, DivergenceError, as_rgb,
                   porosity_of_mask, to_network_domain)

log = logging.getLogger(__name__)

DICE_EPS = 1e-6
BCE_CLAMP = 1e-7
CHECKPOINT_FORMAT = "poregan-segmenter"
CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics and loss


def _check_shapes(pred, truth):
    if tuple(pred.shape) != tuple(truth.shape):
        raise ValidationError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(truth.shape)}")


def _dice_t(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    inter = (pred * truth).sum()
    return 2.0 * inter / (pred.sum() + truth.sum() + DICE_EPS)


def _bce_t(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(truth * torch.log(p) + (1.0 - truth) * torch.log1p(-p)).mean()


def dice_coefficient(pred, truth) -> float:
    """Soft Dice overlap ``2*sum(p*t) / (sum(p) + sum(t) + eps)``."""
    p = torch.as_tensor(np.asarray(pred, dtype=np.float64))
    t = torch.as_tensor(np.asarray(truth, dtype=np.float64))
    _check_shapes(p, t)
    return float(_dice_t(p, t))


def iou_coefficient(pred, truth) -> float:
    """Jaccard overlap using the same smoothing as the Dice score.

    With the shared ``eps`` the identity ``dice = 2*iou / (1 + iou)`` holds
    exactly for binary inputs.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    _check_shapes(p, t)
    inter = float((p * t).sum())
    union = float(p.sum() + t.sum()) - inter
    return inter / (union + DICE_EPS)


def hybrid_loss(pred, truth, dice_weight: float = 0.5, bce_weight: float = 0.5) -> float:
    """Equal-weight Dice + binary cross-entropy on post-sigmoid probabilities."""
    p = torch.as_tensor(np.asarray(pred, dtype=np.float64))
    t = torch.as_tensor(np.asarray(truth, dtype=np.float64))
    _check_shapes(p, t)
    return float(hybrid_loss_t(p, t, dice_weight, bce_weight))


def hybrid_loss_t(pred: torch.Tensor, truth: torch.Tensor,
                  dice_weight: float = 0.5, bce_weight: float = 0.5) -> torch.Tensor:
    return dice_weight * (1.0 - _dice_t(pred, truth)) + bce_weight * _bce_t(pred, truth)


# ---------------------------------------------------------------------------
# network


@dataclass
class SegmentationNetSpec:
    in_channels: int = 3
    depth: int = 4
    base_filters: int = 32
    attention_gates: bool = True
    deep_supervision: bool = True
    # main head first, then auxiliary heads from coarsest-but-one upwards
    supervision_weights: tuple = (1.0, 0.3, 0.2)

    def __post_init__(self):
        if self.depth < 1 or self.base_filters < 1:
            raise ConfigurationError("depth and base_filters must be positive")
        self.supervision_weights = tuple(float(w) for w in self.supervision_weights)

    @property
    def multiple(self) -> int:
        return 2 ** self.depth


class _ConvBlock(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        )


class AttentionGate(nn.Module):
    """Additive attention on a skip connection (Oktay et al. formulation)."""

    def __init__(self, skip_channels, gate_channels, inter_channels):
        super().__init__()
        self.w_x = nn.Conv2d(skip_channels, inter_channels, 1, bias=False)
        self.w_g = nn.Conv2d(gate_channels, inter_channels, 1, bias=True)
        self.psi = nn.Conv2d(inter_channels, 1, 1, bias=True)

    def forward(self, x, g):
        a = F.relu(self.w_x(x) + self.w_g(g))
        return x * torch.sigmoid(self.psi(a))


class AttentionUNet(nn.Module):
    def __init__(self, spec: SegmentationNetSpec):
        super().__init__()
        self.spec = spec
        widths = [spec.base_filters * 2 ** i for i in range(spec.depth + 1)]
        self.encoders = nn.ModuleList()
        cin = spec.in_channels
        for w in widths[:-1]:
            self.encoders.append(_ConvBlock(cin, w))
            cin = w
        self.bottleneck = _ConvBlock(widths[-2], widths[-1])
        self.ups = nn.ModuleList()
        self.gates = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in reversed(range(spec.depth)):
            self.ups.append(nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2))
            self.gates.append(AttentionGate(widths[i], widths[i], max(widths[i] // 2, 1))
                              if spec.attention_gates else nn.Identity())
            self.decoders.append(_ConvBlock(2 * widths[i], widths[i]))
        self.head = nn.Conv2d(widths[0], 1, 1)
        n_aux = len(spec.supervision_weights) - 1 if spec.deep_supervision else 0
        n_aux = min(n_aux, spec.depth - 1)
        # decoder stage k (0 = coarsest) has width widths[depth-1-k]
        self.aux_heads = nn.ModuleList(
            nn.Conv2d(widths[spec.depth - 1 - k], 1, 1) for k in range(n_aux))

    def forward(self, x):
        """Return a list of logits: main head first, then auxiliary heads."""
        size = x.shape[-2:]
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        stage_out = []
        for up, gate, dec, skip in zip(self.ups, self.gates, self.decoders, reversed(skips)):
            x = up(x)
            s = gate(skip, x) if self.spec.attention_gates else skip
            x = dec(torch.cat([s, x], dim=1))
            stage_out.append(x)
        outs = [self.head(x)]
        if self.training:
            for k, aux in enumerate(self.aux_heads):
                outs.append(F.interpolate(aux(stage_out[k]), size=size, mode="bilinear",
                                          align_corners=False))
        return outs


# ---------------------------------------------------------------------------
# training


@dataclass
class SegTrainConfig:
    dice_weight: float = 0.5
    bce_weight: float = 0.5
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    lr_decay: float = 0.9  # multiplicative per epoch
    train_fraction: float = 0.7
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    flip_augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if not math.isclose(self.dice_weight + self.bce_weight, 1.0, abs_tol=1e-12):
            raise ConfigurationError("dice_weight + bce_weight must equal 1")
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if min(fr) < 0 or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
            raise ConfigurationError("split fractions must be non-negative and sum to 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")


@dataclass
class SegMetrics:
    dice: float
    iou: float
    accuracy: float
    porosity_mae: float
    dice_std: float = 0.0
    iou_std: float = 0.0
    accuracy_std: float = 0.0
    n: int = 0
    val_loss_history: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _pad_to_multiple(x: torch.Tensor, m: int):
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return x, (h, w)
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (h, w)


class Segmenter:
    """Trained segmentation model with a numpy-facing inference API."""

    def __init__(self, spec: Optional[SegmentationNetSpec] = None, device: str = "cpu"):
        self.spec = spec or SegmentationNetSpec()
        self.device = torch.device(device)
        self.net = AttentionUNet(self.spec).to(self.device)
        self.trained = False

    # inference ---------------------------------------------------------

    @torch.no_grad()
    def predict_proba(self, images) -> np.ndarray:
        """Pore probability maps for one ``(H, W, 3)`` image or a stack."""
        if not self.trained:
            raise StateError("segmenter has not been trained or loaded")
        arr = np.asarray(images)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        for a in arr:
            as_rgb(a)
        x = torch.from_numpy(_image_batch_to_tensor(arr)).to(self.device)
        self.net.eval()
        out = []
        for i in range(0, len(x), 8):
            xb, (h, w) = _pad_to_multiple(x[i:i + 8], self.spec.multiple)
            logits = self.net(xb)[0][..., :h, :w]
            out.append(torch.sigmoid(logits)[:, 0].cpu().numpy())
        probs = np.concatenate(out)
        return probs[0] if single else probs

    def segment(self, image) -> np.ndarray:
        """Binary pore mask (threshold 0.5 on the sigmoid output)."""
        return self.predict_proba(image) > 0.5

    def porosity(self, image) -> float:
        return porosity_of_mask(self.segment(image))

    __call__ = segment

    # persistence -------------------------------------------------------

    def save(self, path, extra: Optional[dict] = None) -> None:
        torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                    "spec": asdict(self.spec), "state_dict": self.net.state_dict(),
                    "extra": extra or {}}, path)

    @classmethod
    def load(cls, path, device: str = "cpu") -> "Segmenter":
        blob = torch.load(path, map_location=device, weights_only=False)
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise ValidationError(f"{path} is not a segmenter checkpoint")
        if blob.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported segmenter checkpoint version {blob.get('version')}")
        seg = cls(SegmentationNetSpec(**blob["spec"]), device=device)
        seg.net.load_state_dict(blob["state_dict"])
        seg.trained = True
        return seg


def _image_batch_to_tensor(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8 or arr.max() > 1.0 + 1e-6:
        arr = to_network_domain(arr)
    return np.ascontiguousarray(np.asarray(arr, dtype=np.float32).transpose(0, 3, 1, 2))


def _split(n: int, config: SegTrainConfig, rng: np.random.Generator):
    idx = rng.permutation(n)
    n_test = int(round(n * config.test_fraction))
    n_val = int(round(n * config.val_fraction))
    n_train = n - n_test - n_val
    return idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:]


def _deep_supervision_loss(outs, target, spec: SegmentationNetSpec, config: SegTrainConfig):
    weights = spec.supervision_weights[:len(outs)]
    total = sum(weights)
    loss = 0.0
    for w, logits in zip(weights, outs):
        loss = loss + w / total * hybrid_loss_t(torch.sigmoid(logits), target,
                                                config.dice_weight, config.bce_weight)
    return loss


def evaluate_segmenter(segmenter: Segmenter, images, masks) -> SegMetrics:
    """Per-image Dice/IoU/accuracy and porosity MAE, averaged."""
    images = np.asarray(images)
    masks = np.asarray(masks).astype(bool)
    if len(images) == 0:
        raise ConfigurationError("empty evaluation set")
    preds = segmenter.segment(images)
    if preds.ndim == 2:
        preds = preds[None]
    d, j, acc, err = [], [], [], []
    for p, t in zip(preds, masks):
        if not p.any() and not t.any():
            d.append(1.0)
            j.append(1.0)
        else:
            d.append(dice_coefficient(p, t))
            j.append(iou_coefficient(p, t))
        acc.append(float((p == t).mean()))
        err.append(abs(porosity_of_mask(p) - porosity_of_mask(t)))
    return SegMetrics(dice=float(np.mean(d)), iou=float(np.mean(j)),
                      accuracy=float(np.mean(acc)), porosity_mae=float(np.mean(err)),
                      dice_std=float(np.std(d)), iou_std=float(np.std(j)),
                      accuracy_std=float(np.std(acc)), n=len(d))


def train_segmenter(images, masks, config: Optional[SegTrainConfig] = None,
                    spec: Optional[SegmentationNetSpec] = None, device: str = "cpu",
                    test_images=None, test_masks=None):
    """Train a segmenter and report metrics on the held-out split.

    ``images`` is an ``(N, H, W, 3)`` uint8 stack and ``masks`` an
    ``(N, H, W)`` binary stack. When ``test_images``/``test_masks`` are given
    they form the test split and the remaining data is divided into
    train/validation by the configured fractions.

    Returns ``(segmenter, metrics)``. The returned weights are those with
    the lowest validation loss seen, so the validation loss never exceeds
    its first-epoch value.
    """
    config = config or SegTrainConfig()
    images = np.asarray(images)
    masks = np.asarray(masks).astype(np.float32)
    if images.ndim != 4 or len(images) != len(masks) or images.shape[1:3] != masks.shape[1:]:
        raise ConfigurationError("images and masks must be aligned (N,H,W,3) / (N,H,W) stacks")
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    if test_images is None:
        tr, va, te = _split(len(images), config, rng)
        test_images, test_masks = images[te], masks[te]
    else:
        frac = config.train_fraction + config.val_fraction
        sub = SegTrainConfig(train_fraction=config.train_fraction / frac,
                             val_fraction=config.val_fraction / frac, test_fraction=0.0)
        tr, va, _ = _split(len(images), sub, rng)
    for name, n in (("train", len(tr)), ("validation", len(va)), ("test", len(test_images))):
        if n < 2:
            raise ConfigurationError(f"{name} split has {n} samples; need at least 2")

    seg = Segmenter(spec, device=device)
    spec = seg.spec
    x_all = torch.from_numpy(_image_batch_to_tensor(images))
    y_all = torch.from_numpy(masks[:, None])
    opt = torch.optim.Adam(seg.net.parameters(), lr=config.learning_rate)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=config.lr_decay)
    best_loss, best_state, history = math.inf, None, []
    gen = torch.Generator().manual_seed(config.seed)
    for epoch in range(config.epochs):
        seg.net.train()
        order = tr[torch.randperm(len(tr), generator=gen).numpy()]
        for i in range(0, len(order), config.batch_size):
            b = order[i:i + config.batch_size]
            xb, yb = x_all[b].to(seg.device), y_all[b].to(seg.device)
            if config.flip_augment:
                if torch.rand(1, generator=gen).item() < 0.5:
                    xb, yb = xb.flip(-1), yb.flip(-1)
                if torch.rand(1, generator=gen).item() < 0.5:
                    xb, yb = xb.flip(-2), yb.flip(-2)
            loss = _deep_supervision_loss(seg.net(xb), yb, spec, config)
            if not torch.isfinite(loss):
                raise DivergenceError(f"segmentation loss diverged in epoch {epoch + 1}", epoch + 1)
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
        val = _validation_loss(seg, x_all[va], y_all[va], config)
        history.append(val)
        log.info("seg epoch %d/%d val_loss=%.4f", epoch + 1, config.epochs, val)
        if val <= best_loss:
            best_loss = val
            best_state = {k: v.detach().clone() for k, v in seg.net.state_dict().items()}
    seg.net.load_state_dict(best_state)
    seg.trained = True
    metrics = evaluate_segmenter(seg, test_images, np.asarray(test_masks).astype(bool))
    metrics.val_loss_history = history
    return seg, metrics


@torch.no_grad()
def _validation_loss(seg: Segmenter, x, y, config: SegTrainConfig) -> float:
    seg.net.eval()
    total = 0.0
    for i in range(0, len(x), 8):
        xb, (h, w) = _pad_to_multiple(x[i:i + 8].to(seg.device), seg.spec.multiple)
        p = torch.sigmoid(seg.net(xb)[0][..., :h, :w])
        total += float(hybrid_loss_t(p, y[i:i + 8].to(seg.device),
                                     config.dice_weight, config.bce_weight)) * len(p)
    return total / len(x)


class ThresholdSegmenter:
    """Colour-rule pore detector for blue-dyed epoxy.

    Marks a pixel as pore when its blue channel exceeds both red and green
    by ``margin``. Handy as a reference labeller and in tests; it exposes the
    same ``segment``/``porosity`` surface as :class:`Segmenter`.
    """

    def __init__(self, margin: int = 40):
        self.margin = margin
        self.trained = True

    def segment(self, image) -> np.ndarray:
        arr = np.asarray(image)
        if arr.dtype != np.uint8 and arr.min() < 0:
            arr = (arr + 1.0) * 127.5
        arr = arr.astype(np.int32)
        b = arr[..., 2]
        return (b - np.maximum(arr[..., 0], arr[..., 1])) > self.margin

    def porosity(self, image) -> float:
        return porosity_of_mask(self.segment(image))

    __call__ = segment


def mask_fn(segmenter):
    """Return a callable ``image -> bool mask`` for a segmenter-like object."""
    if hasattr(segmenter, "segment"):
        return segmenter.segment
    if callable(segmenter):
        return segmenter
    raise ValidationError("segmenter must be callable or expose .segment()")
