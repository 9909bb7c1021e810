"""Conditional generator/discriminator stacks and their presets."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import List, Tuple

import numpy as np
import torch
import torch.nn as nn

from ..core import ConditionVector, ValidationError

LATENT_DIM = 100
LEAKY_SLOPE = 0.2

# (out_channels, kernel, stride) per transposed-conv block
_GEN_BLOCKS = {
    "original": [(256, 3, 1), (128, 3, 2), (64, 3, 2), (32, 5, 2), (3, 5, 2)],
    "modelA": [(256, 3, 1), (128, 3, 1), (96, 3, 2), (64, 3, 2), (32, 5, 2), (3, 5, 2)],
    "modelB": [(192, 3, 1), (96, 3, 2), (48, 3, 2), (24, 5, 2), (3, 5, 2)],
}
_GEN_DENSE = {"original": 512, "modelA": 384, "modelB": 256}
_DISC_FILTERS = {
    "original": [64, 128, 256, 256, 256],
    "modelA": [56, 112, 224, 224, 224],
    "modelB": [48, 96, 192, 192, 192],
}
_DISC_KERNELS = [5, 5, 3, 3, 3]
ARCHITECTURES = tuple(_GEN_DENSE)
TOY_DIVISOR = 4
TOY_SIZE = 96


@dataclass
class GeneratorSpec:
    latent_dim: int = LATENT_DIM
    dense_channels: int = 512
    base_size: int = 30
    blocks: List[Tuple[int, int, int]] = field(default_factory=lambda: list(_GEN_BLOCKS["original"]))
    n_depths: int = 4
    batch_norm: bool = False
    condition_gain: float = 1.0     # fixed scale on the porosity plane inside forward()
    name: str = "original"

    def __post_init__(self):
        self.blocks = [tuple(int(v) for v in b) for b in self.blocks]
        if self.blocks[-1][0] != 3:
            raise ValidationError("the last generator block must emit 3 channels")

    @property
    def input_channels(self) -> int:
        return self.dense_channels + self.n_depths + 1

    @property
    def output_size(self) -> int:
        s = self.base_size
        for _, _, stride in self.blocks:
            s *= stride
        return s

    def to_dict(self):
        return asdict(self)


@dataclass
class DiscriminatorSpec:
    image_size: int = 480
    filters: List[int] = field(default_factory=lambda: list(_DISC_FILTERS["original"]))
    kernels: List[int] = field(default_factory=lambda: list(_DISC_KERNELS))
    n_depths: int = 4
    dropout: float = 0.3
    condition_gain: float = 1.0
    name: str = "original"

    @property
    def input_channels(self) -> int:
        return 3 + self.n_depths + 1

    @property
    def final_size(self) -> int:
        s = self.image_size
        for _ in self.filters:
            s = (s + 1) // 2
        return s

    def to_dict(self):
        return asdict(self)


def preset(arch: str = "original", n_depths: int = 4, toy: bool = False):
    """Generator and discriminator specs for a named architecture.

    ``toy`` shrinks the output to 96x96 (base 6x6) and divides every
    channel count except the RGB output by four.
    """
    if arch not in ARCHITECTURES:
        raise ValidationError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    g = GeneratorSpec(dense_channels=_GEN_DENSE[arch], blocks=list(_GEN_BLOCKS[arch]),
                      n_depths=n_depths, name=arch)
    d = DiscriminatorSpec(filters=list(_DISC_FILTERS[arch]), n_depths=n_depths, name=arch)
    if toy:
        g, d = toy_scale(g), toy_scale(d)
    return g, d


def toy_scale(spec):
    k = TOY_DIVISOR
    if isinstance(spec, GeneratorSpec):
        blocks = [(c if c == 3 and i == len(spec.blocks) - 1 else max(c // k, 1), ks, st)
                  for i, (c, ks, st) in enumerate(spec.blocks)]
        base = spec.base_size * TOY_SIZE // spec.output_size
        return replace(spec, dense_channels=spec.dense_channels // k, blocks=blocks,
                       base_size=base)
    return replace(spec, image_size=TOY_SIZE, filters=[max(f // k, 1) for f in spec.filters])


def init_weights(module: nn.Module, std: float = 0.02):
    """Normal(0, std) weights and zero biases for conv/linear layers; BN scale near 1."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, std)
            nn.init.zeros_(m.bias)
    return module


def condition_maps(porosity: torch.Tensor, depth_one_hot: torch.Tensor, size: int) -> torch.Tensor:
    """Spatially replicated condition planes: depth one-hot channels then porosity."""
    c = torch.cat([depth_one_hot, porosity.reshape(-1, 1)], dim=1)
    return c[:, :, None, None].expand(-1, -1, size, size)


def _scale_porosity_plane(x: torch.Tensor, gain: float) -> torch.Tensor:
    # porosity is the last channel; a gain > 1 puts its variation on the
    # same footing as the image and feature channels
    if gain == 1.0:
        return x
    scale = torch.ones(x.shape[1], dtype=x.dtype, device=x.device)
    scale[-1] = gain
    return x * scale[None, :, None, None]


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        s = spec.base_size
        self.dense = nn.Linear(spec.latent_dim, spec.dense_channels * s * s)
        layers = []
        cin = spec.input_channels
        for i, (cout, k, stride) in enumerate(spec.blocks):
            last = i == len(spec.blocks) - 1
            pad = (k - 1) // 2
            layers.append(nn.ConvTranspose2d(cin, cout, k, stride=stride, padding=pad,
                                             output_padding=stride - 1))
            if last:
                layers.append(nn.Tanh())
            else:
                if spec.batch_norm:
                    layers.append(nn.BatchNorm2d(cout))
                layers.append(nn.LeakyReLU(LEAKY_SLOPE))
            cin = cout
        self.blocks = nn.Sequential(*layers)
        init_weights(self)

    def assemble_input(self, z, porosity, depth_one_hot):
        if z.shape[-1] != self.spec.latent_dim:
            raise ValidationError(
                f"latent vector has length {z.shape[-1]}, expected {self.spec.latent_dim}")
        s = self.spec.base_size
        h = self.dense(z).reshape(-1, self.spec.dense_channels, s, s)
        h = nn.functional.leaky_relu(h, LEAKY_SLOPE)
        return torch.cat([h, condition_maps(porosity, depth_one_hot, s)], dim=1)

    def forward(self, z, porosity, depth_one_hot):
        x = self.assemble_input(z, porosity, depth_one_hot)
        return self.blocks(_scale_porosity_plane(x, self.spec.condition_gain))


class Discriminator(nn.Module):
    """Returns logits; ``torch.sigmoid`` of the output is the realness score."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        layers = []
        cin = spec.input_channels
        for f, k in zip(spec.filters, spec.kernels):
            layers += [nn.Conv2d(cin, f, k, stride=2, padding=(k - 1) // 2),
                       nn.LeakyReLU(LEAKY_SLOPE), nn.Dropout(spec.dropout)]
            cin = f
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(cin * spec.final_size ** 2, 1)
        init_weights(self)

    @staticmethod
    def assemble_input(images, porosity, depth_one_hot):
        size = images.shape[-1]
        return torch.cat([images, condition_maps(porosity, depth_one_hot, size)], dim=1)

    def forward(self, images, porosity, depth_one_hot):
        if images.shape[-2:] != (self.spec.image_size, self.spec.image_size):
            raise ValidationError(f"discriminator expects {self.spec.image_size}px images")
        x = self.assemble_input(images, porosity, depth_one_hot)
        h = self.features(_scale_porosity_plane(x, self.spec.condition_gain))
        return self.head(h.flatten(1)).squeeze(1)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def parameter_count(gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec) -> int:
    """Trainable parameters of the generator/discriminator pair, computed analytically."""
    s = gen_spec.base_size
    n = (gen_spec.latent_dim + 1) * gen_spec.dense_channels * s * s
    cin = gen_spec.input_channels
    for i, (cout, k, _) in enumerate(gen_spec.blocks):
        n += cin * cout * k * k + cout
        if gen_spec.batch_norm and i < len(gen_spec.blocks) - 1:
            n += 2 * cout
        cin = cout
    cin = disc_spec.input_channels
    for f, k in zip(disc_spec.filters, disc_spec.kernels):
        n += cin * f * k * k + f
        cin = f
    n += cin * disc_spec.final_size ** 2 + 1
    return n


# numpy-facing assembly helpers, channels-last like the tables


def _cond_tensors(c: ConditionVector, dtype=torch.float32):
    return (torch.tensor([c.porosity], dtype=dtype),
            torch.from_numpy(c.depth_one_hot[None].astype(np.float32)).to(dtype))


@torch.no_grad()
def assemble_generator_input(z, c: ConditionVector, generator: Generator) -> np.ndarray:
    """Generator input block as ``(base, base, dense + n_depths + 1)``."""
    z = torch.as_tensor(np.asarray(z, dtype=np.float32)).reshape(1, -1)
    if c.n_depths != generator.spec.n_depths:
        raise ValidationError("condition depth count does not match the generator")
    phi, onehot = _cond_tensors(c)
    return generator.assemble_input(z, phi, onehot)[0].permute(1, 2, 0).numpy()


def assemble_discriminator_input(image, c: ConditionVector) -> np.ndarray:
    """Image channels followed by replicated depth and porosity planes."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] != img.shape[1]:
        raise ValidationError(f"expected a square (S, S, 3) image, got {img.shape}")
    if img.min() < -1.0 - 1e-6 or img.max() > 1.0 + 1e-6:
        raise ValidationError("discriminator input must be in the [-1, 1] network domain")
    phi, onehot = _cond_tensors(c)
    x = torch.from_numpy(img).permute(2, 0, 1)[None]
    return Discriminator.assemble_input(x, phi, onehot)[0].permute(1, 2, 0).numpy()


def read_condition(planes: np.ndarray, n_depths: int) -> ConditionVector:
    """Recover the condition from replicated planes (the trailing ``n_depths + 1`` channels)."""
    cond = planes[..., -(n_depths + 1):]
    flat = cond.reshape(-1, n_depths + 1)
    if not np.all(flat == flat[0]):
        raise ValidationError("condition planes are not spatially constant")
    from ..core import depth_from_one_hot
    return ConditionVector(float(flat[0, -1]), depth_from_one_hot(flat[0, :-1]))
