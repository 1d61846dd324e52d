"""Construction of target latent codes from source codes.

Every function here takes an extended code of shape (batch, n_layers, d_w) or
(n_layers, d_w) and returns one of the same shape. The learnable offsets are
small ``nn.Module`` containers so the training engine can hand them to an
optimizer directly.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .networks import ArchConfig, ConfigError, EqualizedLinear


def extend(w: torch.Tensor, n_layers: int) -> torch.Tensor:
    """Repeat a style code ``n_layers`` times along a new row axis.

    ``w`` may be a single (d_w,) vector or a (batch, d_w) batch.
    """
    return w.unsqueeze(-2).expand(*w.shape[:-1], n_layers, w.shape[-1]).clone()


def _check_rows(w_src: torch.Tensor, n_layers: int, d_w: int) -> None:
    if w_src.shape[-2:] != (n_layers, d_w):
        raise ConfigError(f"expected trailing shape ({n_layers}, {d_w}), got {tuple(w_src.shape)}")


class DeltaW(nn.Module):
    """Constant per-layer offset; zero-initialised so training starts at the source model."""

    def __init__(self, n_layers: int, d_w: int):
        super().__init__()
        self.offset = nn.Parameter(torch.zeros(n_layers, d_w))

    @classmethod
    def for_arch(cls, arch: ArchConfig) -> "DeltaW":
        return cls(arch.n_layers, arch.d_w)

    def forward(self, w_src: torch.Tensor) -> torch.Tensor:
        return relocate_constant(w_src, self.offset)


class UnifiedDelta(nn.Module):
    """A single d_w offset shared by every layer."""

    def __init__(self, d_w: int):
        super().__init__()
        self.offset = nn.Parameter(torch.zeros(d_w))

    def forward(self, w_src: torch.Tensor) -> torch.Tensor:
        return relocate_unified(w_src, self.offset)


class TwoLayerNet(nn.Module):
    """fc -> activation -> fc, with the output layer zero-initialised.

    Both layers use the same equalized learning rate as the generator's own
    fully connected layers, so the input-dependent weights take optimizer
    steps on the same scale as the constant bias.
    """

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = EqualizedLinear(d_in, d_hidden)
        self.fc2 = EqualizedLinear(d_hidden, d_out)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.leaky_relu(self.fc1(x), 0.2))


class AdaptiveOffsetNets(nn.Module):
    """One offset network per style-consuming layer: row -> row + net(row)."""

    def __init__(self, n_layers: int, d_w: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or d_w
        self.nets = nn.ModuleList(TwoLayerNet(d_w, hidden, d_w) for _ in range(n_layers))

    @classmethod
    def for_arch(cls, arch: ArchConfig) -> "AdaptiveOffsetNets":
        return cls(arch.n_layers, arch.d_w)

    def offsets(self, w_src: torch.Tensor) -> torch.Tensor:
        if w_src.shape[-2] != len(self.nets):
            raise ConfigError(f"{len(self.nets)} offset nets for {w_src.shape[-2]} rows")
        return torch.stack([net(w_src[..., i, :]) for i, net in enumerate(self.nets)], dim=-2)

    def forward(self, w_src: torch.Tensor) -> torch.Tensor:
        return relocate_adaptive(w_src, self)


# tanh rounds to exactly +-1 in float32 once |x| > ~9; shrinking by one part in
# 2**20 keeps every residual strictly inside (-1, 1) at any input.
ALPHA_SHRINK = 1.0 - 2.0 ** -20


class AlphaModules(nn.Module):
    """Per-block intensity residuals in (-1, 1).

    Block ``b`` reads its own first style row and emits one scalar that scales
    the offset for all rows of that block.
    """

    def __init__(self, block_rows: Sequence[Sequence[int]], d_w: int, hidden: Optional[int] = None):
        super().__init__()
        self.block_rows = [list(r) for r in block_rows]
        hidden = hidden or max(1, d_w // 2)
        self.nets = nn.ModuleList(TwoLayerNet(d_w, hidden, 1) for _ in self.block_rows)

    @classmethod
    def for_arch(cls, arch: ArchConfig) -> "AlphaModules":
        return cls(arch.block_rows(), arch.d_w)

    @property
    def n_layers(self) -> int:
        return sum(len(r) for r in self.block_rows)

    def alphas(self, w_src: torch.Tensor) -> torch.Tensor:
        """(..., n_blocks) residuals."""
        return torch.cat(
            [torch.tanh(net(w_src[..., rows[0], :])) * ALPHA_SHRINK for net, rows in zip(self.nets, self.block_rows)],
            dim=-1)

    def row_alphas(self, alphas: torch.Tensor) -> torch.Tensor:
        """Expand per-block residuals to per-row, shape (..., n_layers)."""
        idx = torch.tensor([b for b, rows in enumerate(self.block_rows) for _ in rows])
        return alphas[..., idx]


def relocate_constant(w_src: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    if isinstance(delta, DeltaW):
        delta = delta.offset
    _check_rows(w_src, *delta.shape)
    return w_src + delta


def relocate_unified(w_src: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    if isinstance(u, UnifiedDelta):
        u = u.offset
    if u.ndim != 1 or w_src.shape[-1] != u.shape[0]:
        raise ConfigError(f"unified offset of shape {tuple(u.shape)} does not fit codes {tuple(w_src.shape)}")
    return w_src + u


def relocate_adaptive(w_src: torch.Tensor, nets: AdaptiveOffsetNets) -> torch.Tensor:
    return w_src + nets.offsets(w_src)


def relocate_alpha(w_src: torch.Tensor, delta: torch.Tensor, alphas: AlphaModules,
                   alpha_values: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``w_src + (1 + alpha) * delta`` with alpha shared within each synthesis block.

    ``alpha_values`` (…, n_blocks) overrides the module outputs; useful for
    inspecting hand-set intensities.
    """
    if isinstance(delta, DeltaW):
        delta = delta.offset
    _check_rows(w_src, *delta.shape)
    if alphas.n_layers != delta.shape[0]:
        raise ConfigError(f"alpha modules cover {alphas.n_layers} rows, offset has {delta.shape[0]}")
    a = alphas.alphas(w_src) if alpha_values is None else alpha_values
    scale = 1.0 + alphas.row_alphas(a)
    return w_src + scale.unsqueeze(-1) * delta


def interpolate(w_src: torch.Tensor, delta: torch.Tensor, lam: float) -> torch.Tensor:
    if isinstance(delta, DeltaW):
        delta = delta.offset
    _check_rows(w_src, *delta.shape)
    return w_src + lam * delta


def trainable_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def offsets_of(relocator: nn.Module, w_src: torch.Tensor) -> torch.Tensor:
    """Per-sample offsets the relocator adds to ``w_src``.

    Read straight from the module where possible, so equal offsets compare
    equal bit for bit instead of through ``(w + d) - w`` round-off.
    """
    if isinstance(relocator, AdaptiveOffsetNets):
        return relocator.offsets(w_src)
    if isinstance(relocator, (DeltaW, UnifiedDelta)):
        off = relocator.offset if relocator.offset.ndim == 2 else relocator.offset.expand(w_src.shape[-2], -1)
        return off.expand_as(w_src).clone()
    return relocator(w_src) - w_src


def constant_nets_like(delta: torch.Tensor) -> AdaptiveOffsetNets:
    """Adaptive nets whose every net ignores its input and emits the matching row of ``delta``."""
    n, d = delta.shape
    nets = AdaptiveOffsetNets(n, d)
    with torch.no_grad():
        for i, net in enumerate(nets.nets):
            net.fc1.weight.zero_()
            net.fc1.bias.zero_()
            net.fc2.weight.zero_()
            net.fc2.bias.copy_(delta[i])
    return nets


__all__: List[str] = [
    "extend", "DeltaW", "UnifiedDelta", "AdaptiveOffsetNets", "AlphaModules",
    "relocate_constant", "relocate_unified", "relocate_adaptive", "relocate_alpha",
    "interpolate", "trainable_count", "offsets_of", "constant_nets_like",
]
