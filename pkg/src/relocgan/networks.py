"""Miniature style-based generator and strided convolutional discriminator.

The generator follows the usual two-stage layout: a fully connected mapping
network turns ``z`` into a style code ``w``, and a synthesis network renders an
image from an *extended* code (one style row per style-consuming layer).
Rows are consumed in this order, block by block::

    block 0 (4x4):   conv,          to_rgb
    block k (>4):    conv0, conv1,  to_rgb

so ``n_layers = 1 + 2 * (blocks - 1) + blocks``.

Per-pixel noise inputs are deliberately absent: the only stochastic input to
the synthesis network is the extended style code.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn


class ConfigError(ValueError):
    """Raised when an architecture config or an input disagrees with it."""


@dataclass(frozen=True)
class ArchConfig:
    d_z: int = 64
    d_w: int = 64
    mapping_depth: int = 2
    resolutions: Tuple[int, ...] = (4, 8, 16, 32)
    channels: Tuple[int, ...] = (128, 128, 64, 64)
    d_channels: Optional[Tuple[int, ...]] = None
    mapping_lr_mul: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "resolutions", tuple(int(r) for r in self.resolutions))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.d_channels is not None:
            object.__setattr__(self, "d_channels", tuple(int(c) for c in self.d_channels))
        if not self.resolutions or self.resolutions[0] != 4:
            raise ConfigError("resolutions must start at 4")
        for lo, hi in zip(self.resolutions, self.resolutions[1:]):
            if hi != 2 * lo:
                raise ConfigError(f"resolutions must double at every block, got {self.resolutions}")
        if len(self.channels) != len(self.resolutions):
            raise ConfigError("one channel width per resolution is required")
        if self.d_channels is not None and len(self.d_channels) != len(self.resolutions):
            raise ConfigError("one discriminator width per resolution is required")
        if min(self.d_z, self.d_w, self.mapping_depth) < 1:
            raise ConfigError("d_z, d_w and mapping_depth must be positive")
        if not self.mapping_lr_mul > 0:
            raise ConfigError("mapping_lr_mul must be positive")

    @property
    def n_blocks(self) -> int:
        return len(self.resolutions)

    @property
    def n_layers(self) -> int:
        return 1 + 2 * (self.n_blocks - 1) + self.n_blocks

    @property
    def resolution(self) -> int:
        return self.resolutions[-1]

    @property
    def disc_channels(self) -> Tuple[int, ...]:
        return self.d_channels if self.d_channels is not None else self.channels

    def layer_labels(self) -> List[Tuple[int, str]]:
        """(resolution, kind) for every style row, kind in Conv0/Conv1/ToRGB."""
        labels = []
        for b, res in enumerate(self.resolutions):
            labels.append((res, "Conv0"))
            if b > 0:
                labels.append((res, "Conv1"))
            labels.append((res, "ToRGB"))
        return labels

    def block_rows(self) -> List[List[int]]:
        """Style-row indices owned by each synthesis block."""
        rows, i = [], 0
        for b in range(self.n_blocks):
            k = 2 if b == 0 else 3
            rows.append(list(range(i, i + k)))
            i += k
        return rows

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolutions"] = list(self.resolutions)
        d["channels"] = list(self.channels)
        d["d_channels"] = None if self.d_channels is None else list(self.d_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown arch keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("resolutions", "channels", "d_channels"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


# Equalized learning rate: weights are stored at unit variance and scaled by
# 1/sqrt(fan_in) on every forward pass. The mapping network additionally uses a
# learning-rate multiplier so that w drifts slowly compared with the synthesis
# weights; without it adversarial training is unstable at this scale.


class EqualizedLinear(nn.Module):
    """Linear layer with runtime weight scaling.

    ``lr_mul`` lowers the effective learning rate of this layer under Adam:
    parameters are stored divided by ``lr_mul`` and multiplied back in the
    forward pass, so the same optimizer step moves the output ``lr_mul`` times
    as far. The initial function does not depend on ``lr_mul``.
    """

    def __init__(self, in_features: int, out_features: int, bias_init: float = 0.0, lr_mul: float = 1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init) / lr_mul))
        self.scale = lr_mul / math.sqrt(in_features)
        self.lr_mul = lr_mul

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)


class EqualizedConv2d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.stride = stride
        self.padding = kernel_size // 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.weight * self.scale, self.bias, stride=self.stride, padding=self.padding)


def normalize_2nd_moment(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return x * (x.square().mean(dim=1, keepdim=True) + eps).rsqrt()


class MappingNetwork(nn.Module):
    """z -> w. Hidden layers use leaky ReLU; the last layer is affine."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        dims = [arch.d_z] + [arch.d_w] * arch.mapping_depth
        self.fcs = nn.ModuleList(EqualizedLinear(a, b, lr_mul=arch.mapping_lr_mul) for a, b in zip(dims, dims[1:]))

    @torch.no_grad()
    def set_output_bias(self, bias: torch.Tensor) -> None:
        """Make the effective bias of the last layer equal ``bias``."""
        last = self.fcs[-1]
        last.bias.copy_(torch.as_tensor(bias, dtype=last.bias.dtype) / last.lr_mul)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.arch.d_z:
            raise ConfigError(f"expected z of shape (batch, {self.arch.d_z}), got {tuple(z.shape)}")
        x = normalize_2nd_moment(z)
        for i, fc in enumerate(self.fcs):
            x = fc(x)
            if i < len(self.fcs) - 1:
                x = F.leaky_relu(x, 0.2)
        return x


def modulated_conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    styles: torch.Tensor,
    demodulate: bool = True,
    padding: int = 0,
    eps: float = 1e-8,
) -> torch.Tensor:
    """Convolve ``x`` with ``weight`` modulated per sample by ``styles``.

    ``styles`` has shape (batch, in_channels) and scales the input channels of
    every filter. With ``demodulate`` each output filter is then rescaled to
    unit L2 norm, so a positive rescaling of ``styles`` has no effect.

    The modulation is applied to the activations rather than the weights; the
    result equals the grouped-convolution formulation but runs as one ordinary
    convolution, which is much faster on CPU.
    """
    if styles.ndim != 2 or styles.shape[1] != weight.shape[1]:
        raise ConfigError(f"styles must be (batch, {weight.shape[1]}), got {tuple(styles.shape)}")
    x = x * styles[:, :, None, None]
    x = F.conv2d(x, weight, padding=padding)
    if demodulate:
        w = weight[None] * styles[:, None, :, None, None]
        dcoefs = (w.square().sum(dim=(2, 3, 4)) + eps).rsqrt()
        x = x * dcoefs[:, :, None, None]
    return x


def modulated_weights(weight: torch.Tensor, styles: torch.Tensor, demodulate: bool = True, eps: float = 1e-8):
    """Explicit per-sample weights, shape (batch, out, in, k, k). Used by tests and diagnostics."""
    w = weight[None] * styles[:, None, :, None, None]
    if demodulate:
        w = w * (w.square().sum(dim=(2, 3, 4), keepdim=True) + eps).rsqrt()
    return w


class ModulatedConv(nn.Module):
    """One style-consuming layer: affine(w_row) -> modulated conv -> bias -> activation."""

    def __init__(self, d_w: int, in_channels: int, out_channels: int, kernel_size: int,
                 demodulate: bool = True, activate: bool = True):
        super().__init__()
        self.affine = EqualizedLinear(d_w, in_channels, bias_init=1.0)
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.demodulate = demodulate
        self.activate = activate
        self.padding = kernel_size // 2
        # Without demodulation the fan-in scale has to live in the style.
        self.weight_gain = 1.0 if demodulate else 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)

    def forward(self, x: torch.Tensor, w_row: torch.Tensor) -> torch.Tensor:
        styles = self.affine(w_row) * self.weight_gain
        x = modulated_conv2d(x, self.weight, styles, demodulate=self.demodulate, padding=self.padding)
        x = x + self.bias[None, :, None, None]
        if self.activate:
            x = F.leaky_relu(x, 0.2) * math.sqrt(2)
        return x


class SynthesisBlock(nn.Module):
    def __init__(self, d_w: int, in_channels: int, out_channels: int, first: bool):
        super().__init__()
        self.first = first
        if first:
            self.const = nn.Parameter(torch.randn(out_channels, 4, 4))
            self.convs = nn.ModuleList([ModulatedConv(d_w, out_channels, out_channels, 3)])
        else:
            self.convs = nn.ModuleList([
                ModulatedConv(d_w, in_channels, out_channels, 3),
                ModulatedConv(d_w, out_channels, out_channels, 3),
            ])
        self.to_rgb = ModulatedConv(d_w, out_channels, 3, 1, demodulate=False, activate=False)

    @property
    def n_rows(self) -> int:
        return len(self.convs) + 1

    def forward(self, x, img, rows: torch.Tensor):
        if self.first:
            x = self.const[None].expand(rows.shape[0], -1, -1, -1)
        else:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        for i, conv in enumerate(self.convs):
            x = conv(x, rows[:, i])
        y = self.to_rgb(x, rows[:, -1])
        if img is not None:
            img = F.interpolate(img, scale_factor=2, mode="bilinear", align_corners=False)
            y = img + y
        return x, y


class SynthesisNetwork(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        blocks = []
        prev = arch.channels[0]
        for b, ch in enumerate(arch.channels):
            blocks.append(SynthesisBlock(arch.d_w, prev, ch, first=(b == 0)))
            prev = ch
        self.blocks = nn.ModuleList(blocks)

    def forward(self, w_plus: torch.Tensor, return_features: bool = False):
        """Render images from extended codes of shape (batch, n_layers, d_w)."""
        arch = self.arch
        if w_plus.ndim != 3 or w_plus.shape[1:] != (arch.n_layers, arch.d_w):
            raise ConfigError(
                f"expected w_plus of shape (batch, {arch.n_layers}, {arch.d_w}), got {tuple(w_plus.shape)}")
        x = img = None
        feats = []
        i = 0
        for block in self.blocks:
            x, img = block(x, img, w_plus[:, i:i + block.n_rows])
            i += block.n_rows
            feats.append(x)
        img = torch.tanh(img)
        if return_features:
            return img, feats
        return img


class Discriminator(nn.Module):
    """Plain strided conv stack; ``layers[0]`` touches the image, ``layers[-1]`` emits the logit.

    For every resolution above 4 there is a 3x3 conv followed by a stride-2
    3x3 conv; at 4x4 there is one conv, a flattening FC layer and the output FC.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        chans = list(reversed(arch.disc_channels))
        ress = list(reversed(arch.resolutions))
        layers: List[nn.Module] = [EqualizedConv2d(3, chans[0], 1)]
        block_ends = []
        for i in range(len(ress) - 1):
            layers.append(EqualizedConv2d(chans[i], chans[i], 3))
            layers.append(EqualizedConv2d(chans[i], chans[i + 1], 3, stride=2))
            block_ends.append(len(layers) - 1)
        layers.append(EqualizedConv2d(chans[-1], chans[-1], 3))
        layers.append(EqualizedLinear(chans[-1] * 16, chans[-1]))
        block_ends.append(len(layers) - 1)
        layers.append(EqualizedLinear(chans[-1], 1))
        self.layers = nn.ModuleList(layers)
        # Outputs of these layer indices are the per-block features.
        self.block_ends = tuple(block_ends)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def forward(self, images: torch.Tensor, return_features: bool = False):
        res = self.arch.resolution
        if images.ndim != 4 or images.shape[1:] != (3, res, res):
            raise ConfigError(f"expected images of shape (batch, 3, {res}, {res}), got {tuple(images.shape)}")
        x = images
        feats = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if isinstance(layer, EqualizedLinear) and x.ndim == 4:
                x = x.flatten(1)
            x = layer(x)
            if i < last:
                x = F.leaky_relu(x, 0.2) * math.sqrt(2)
            if i in self.block_ends:
                feats.append(x)
        logits = x.squeeze(1)
        if return_features:
            return logits, feats
        return logits


def params_hash(*modules: nn.Module) -> str:
    """SHA-256 over the raw bytes of every parameter and buffer, in registration order."""
    h = hashlib.sha256()
    for m in modules:
        for name, t in list(m.named_parameters()) + list(m.named_buffers()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class GeneratorBundle:
    arch: ArchConfig
    mapping: MappingNetwork
    synthesis: SynthesisNetwork
    discriminator: Discriminator
    frozen: bool = False
    _hash_at_freeze: Optional[str] = field(default=None, repr=False)

    @classmethod
    def create(cls, arch: ArchConfig, seed: int = 0) -> "GeneratorBundle":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            mapping = MappingNetwork(arch)
            synthesis = SynthesisNetwork(arch)
            discriminator = Discriminator(arch)
        return cls(arch, mapping, synthesis, discriminator)

    def generator_hash(self) -> str:
        return params_hash(self.mapping, self.synthesis)

    def freeze_generator(self) -> None:
        for p in list(self.mapping.parameters()) + list(self.synthesis.parameters()):
            p.requires_grad_(False)
        self.frozen = True
        self._hash_at_freeze = self.generator_hash()

    def check_frozen(self) -> None:
        if self.frozen and self.generator_hash() != self._hash_at_freeze:
            raise RuntimeError("frozen generator parameters changed")

    def generator_parameter_count(self) -> int:
        return sum(p.numel() for p in self.mapping.parameters()) + sum(
            p.numel() for p in self.synthesis.parameters())


def map_latent(z: torch.Tensor, mapping: MappingNetwork) -> torch.Tensor:
    return mapping(z)


def synthesize(w_plus: torch.Tensor, synthesis: SynthesisNetwork) -> torch.Tensor:
    return synthesis(w_plus)


def discriminate(images: torch.Tensor, discriminator: Discriminator) -> torch.Tensor:
    return discriminator(images)


def modulate_conv(features: torch.Tensor, style_row: torch.Tensor, layer: ModulatedConv) -> torch.Tensor:
    """Apply one style-consuming layer (without bias/activation) to ``features``."""
    if style_row.ndim == 1:
        style_row = style_row[None].expand(features.shape[0], -1)
    styles = layer.affine(style_row) * layer.weight_gain
    return modulated_conv2d(features, layer.weight, styles, demodulate=layer.demodulate, padding=layer.padding)


def style_layers(synthesis: SynthesisNetwork) -> Sequence[ModulatedConv]:
    """All style-consuming layers in w_plus row order."""
    out = []
    for block in synthesis.blocks:
        out.extend(block.convs)
        out.append(block.to_rgb)
    return out
