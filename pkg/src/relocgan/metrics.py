"""FID / KID / LPIPS analogues on a fixed random-convolution encoder, offset
geometry statistics and Welch's t-test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.stats
import torch
import torch.nn.functional as F
from scipy.spatial.distance import pdist
from torch import nn


@dataclass
class FeatureSet:
    features: np.ndarray
    encoder_id: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D (rows, dims) array")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")

    def __len__(self):
        return self.features.shape[0]


@dataclass
class MetricReport:
    metric: str
    value: float
    n_a: int
    n_b: int
    encoder_id: str
    config_hash: str = ""
    extra: Dict[str, float] = field(default_factory=dict)


class RandomConvEncoder(nn.Module):
    """Four stride-2 convolutions with fixed random weights, then global average pooling.

    Weights come from a dedicated ``torch.Generator`` seeded with ``seed``, so
    two processes constructing the encoder with the same seed produce the same
    features bit for bit.
    """

    widths = (32, 64, 128, 256)

    def __init__(self, seed: int = 1234, resolution: int = 32):
        super().__init__()
        self.seed = seed
        self.resolution = resolution
        gen = torch.Generator().manual_seed(seed)
        convs = []
        c_in = 3
        for c_out in self.widths:
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (c_in * 9)))
                conv.bias.zero_()
            conv.requires_grad_(False)
            convs.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(convs)

    @property
    def encoder_id(self) -> str:
        return f"randconv-{self.resolution}-seed{self.seed}"

    @property
    def dim(self) -> int:
        return self.widths[-1]

    def feature_maps(self, images: torch.Tensor) -> List[torch.Tensor]:
        if images.ndim != 4 or images.shape[1:] != (3, self.resolution, self.resolution):
            raise ValueError(f"encoder expects (batch, 3, {self.resolution}, {self.resolution}), "
                             f"got {tuple(images.shape)}")
        x = images.float()
        maps = []
        for conv in self.convs:
            x = F.relu(conv(x))
            maps.append(x)
        return maps

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.feature_maps(images)[-1].mean(dim=(2, 3))


def _batches(images: torch.Tensor, size: int = 256):
    for i in range(0, images.shape[0], size):
        yield images[i:i + size]


@torch.no_grad()
def encode(images: torch.Tensor, encoder: RandomConvEncoder) -> FeatureSet:
    feats = [encoder(b) for b in _batches(images)]
    return FeatureSet(torch.cat(feats).double().numpy(), encoder.encoder_id)


def _check_pair(a: FeatureSet, b: FeatureSet, min_rows: int = 2) -> None:
    if a.encoder_id != b.encoder_id:
        raise ValueError(f"encoder mismatch: {a.encoder_id} vs {b.encoder_id}")
    if len(a) < min_rows or len(b) < min_rows:
        raise ValueError(f"need at least {min_rows} rows in each feature set")
    if a.features.shape[1] != b.features.shape[1]:
        raise ValueError("feature dimensions differ")


def _frechet(mu_a, cov_a, mu_b, cov_b) -> float:
    covmean = scipy.linalg.sqrtm(cov_a @ cov_b)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(covmean))


def fid(a: FeatureSet, b: FeatureSet, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    Both covariances get ``eps * I`` added before the matrix square root, and
    the result is averaged over both argument orders so it is exactly symmetric.
    """
    _check_pair(a, b)
    fa, fb = a.features, b.features
    d = fa.shape[1]
    mu_a, mu_b = fa.mean(0), fb.mean(0)
    cov_a = np.atleast_2d(np.cov(fa, rowvar=False)) + eps * np.eye(d)
    cov_b = np.atleast_2d(np.cov(fb, rowvar=False)) + eps * np.eye(d)
    value = 0.5 * (_frechet(mu_a, cov_a, mu_b, cov_b) + _frechet(mu_b, cov_b, mu_a, cov_a))
    return max(value, 0.0)


def _subset_indices(n: int, size: int, n_subsets: int, seed: int) -> np.ndarray:
    # Indices depend only on the set's own size, which keeps kid(a, b) == kid(b, a).
    rng = np.random.default_rng([seed, n])
    return np.stack([rng.choice(n, size, replace=False) for _ in range(n_subsets)])


def kid(a: FeatureSet, b: FeatureSet, n_subsets: int = 100, max_subset_size: int = 1000,
        seed: int = 0, return_std: bool = False):
    """Unbiased MMD^2 with kernel (x.y / f + 1)^3, averaged over random subsets.

    With ``return_std`` also returns the standard deviation of the per-subset
    estimates, i.e. the standard error of one block's estimate. Subsets drawn
    from the same rows overlap, so dividing by sqrt(n_subsets) would
    understate the uncertainty.
    """
    _check_pair(a, b)
    fa, fb = a.features, b.features
    f = fa.shape[1]
    m = min(len(fa), len(fb), max_subset_size)
    ia = _subset_indices(len(fa), m, n_subsets, seed)
    ib = _subset_indices(len(fb), m, n_subsets, seed)
    vals = np.empty(n_subsets)
    for k in range(n_subsets):
        x, y = fa[ia[k]], fb[ib[k]]
        kxx = (x @ x.T / f + 1) ** 3
        kyy = (y @ y.T / f + 1) ** 3
        kxy = (x @ y.T / f + 1) ** 3
        s = kxx + kyy
        vals[k] = (s.sum() - np.trace(s)) / (m * (m - 1)) - 2.0 * kxy.mean()
    value = float(vals.mean())
    if return_std:
        return value, float(vals.std(ddof=1)) if n_subsets > 1 else 0.0
    return value


class LPIPS:
    """Perceptual distance: uniformly weighted mean squared distance between
    channel-normalised encoder feature maps."""

    def __init__(self, encoder: RandomConvEncoder, weights: Optional[Sequence[float]] = None):
        self.encoder = encoder
        n = len(encoder.widths)
        self.weights = list(weights) if weights is not None else [1.0 / n] * n

    @torch.no_grad()
    def embed(self, images: torch.Tensor) -> List[torch.Tensor]:
        """Flattened, unit-normalised, layer-weighted maps; squared L2 between two
        embeddings of a layer summed over layers gives the distance."""
        out: List[List[torch.Tensor]] = [[] for _ in self.weights]
        for batch in _batches(images):
            for l, fmap in enumerate(self.encoder.feature_maps(batch)):
                fmap = fmap.double()
                fmap = fmap / (fmap.square().sum(1, keepdim=True).sqrt() + 1e-10)
                hw = fmap.shape[2] * fmap.shape[3]
                out[l].append(fmap.flatten(1) * math.sqrt(self.weights[l] / hw))
        return [torch.cat(parts) for parts in out]

    def pairwise(self, emb_a: List[torch.Tensor], emb_b: Optional[List[torch.Tensor]] = None) -> np.ndarray:
        """Distance matrix between two embedded sets (or within one)."""
        same = emb_b is None
        emb_b = emb_a if same else emb_b
        total = None
        for ea, eb in zip(emb_a, emb_b):
            # direct differences rather than the Gram expansion: identical rows give exactly 0
            d = torch.cdist(ea, eb, compute_mode="donot_use_mm_for_euclid_dist").square()
            total = d if total is None else total + d
        total = total.numpy()
        if same:
            total = 0.5 * (total + total.T)
            np.fill_diagonal(total, 0.0)
        return total

    def __call__(self, img_a: torch.Tensor, img_b: torch.Tensor) -> np.ndarray:
        if img_a.shape != img_b.shape:
            raise ValueError(f"shape mismatch: {tuple(img_a.shape)} vs {tuple(img_b.shape)}")
        squeeze = img_a.ndim == 3
        if squeeze:
            img_a, img_b = img_a[None], img_b[None]
        ea, eb = self.embed(img_a), self.embed(img_b)
        d = sum((x - y).square().sum(1) for x, y in zip(ea, eb)).numpy()
        return float(d[0]) if squeeze else d


def lpips(img_a: torch.Tensor, img_b: torch.Tensor, encoder: RandomConvEncoder):
    return LPIPS(encoder)(img_a, img_b)


def intra_cluster_lpips(generated: torch.Tensor, fewshot: torch.Tensor, encoder: RandomConvEncoder) -> float:
    """Cluster generated images by nearest few-shot image, average within-cluster
    pairwise distances, then average over clusters that have at least one pair."""
    if generated.shape[0] < 2:
        raise ValueError("need at least two generated images")
    if fewshot.shape[0] < 1:
        raise ValueError("need at least one few-shot image")
    metric = LPIPS(encoder)
    eg = metric.embed(generated)
    ef = metric.embed(fewshot)
    assign = metric.pairwise(eg, ef).argmin(axis=1)
    within = metric.pairwise(eg)
    scores = []
    for c in np.unique(assign):
        idx = np.flatnonzero(assign == c)
        if len(idx) < 2:
            continue
        block = within[np.ix_(idx, idx)]
        scores.append(block[np.triu_indices(len(idx), 1)].mean())
    return float(np.mean(scores)) if scores else 0.0


@dataclass
class OffsetStatsRow:
    resolution: int
    kind: str
    cosine: float
    l1: float
    n_samples: int

    @property
    def label(self) -> str:
        return f"{self.resolution} {self.kind}"


def offset_stats(offsets, labels: Optional[Sequence[Tuple[int, str]]] = None) -> List[OffsetStatsRow]:
    """Mean pairwise cosine similarity and L1 distance of each layer's offset rows.

    ``offsets`` is a sequence of (n_layers, d) matrices or one
    (samples, n_layers, d) array.
    """
    arr = np.asarray(offsets, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] < 2:
        raise ValueError("need at least two (n_layers, d) offset samples")
    n = arr.shape[1]
    if labels is None:
        labels = [(i, "Layer") for i in range(n)]
    rows = []
    for i in range(n):
        x = arr[:, i, :]
        norms = np.linalg.norm(x, axis=1)
        if np.all(x == x[0]):
            # identical rows: report exact values instead of pdist round-off
            cos, l1 = 1.0, 0.0
        else:
            cos_d = pdist(x, "cosine") if np.all(norms > 0) else np.full(len(x) * (len(x) - 1) // 2, 1.0)
            cos = float(np.clip(1.0 - cos_d, -1.0, 1.0).mean())
            l1 = float(pdist(x, "cityblock").mean())
        rows.append(OffsetStatsRow(labels[i][0], labels[i][1], cos, l1, arr.shape[0]))
    return rows


def format_offset_table(rows: Sequence[OffsetStatsRow]) -> str:
    """Resolution-by-layer-kind table with cos/L1 pairs, '-' where a layer is absent."""
    kinds = ("Conv0", "Conv1", "ToRGB")
    by_res: Dict[int, Dict[str, OffsetStatsRow]] = {}
    for r in rows:
        by_res.setdefault(r.resolution, {})[r.kind] = r
    head = "Res. | " + " | ".join(f"{k} cos  {k} L1" for k in kinds)
    lines = [head]
    for res in sorted(by_res):
        cells = []
        for k in kinds:
            r = by_res[res].get(k)
            cells.append("-  -" if r is None else f"{r.cosine:.4f}  {r.l1:.4f}")
        lines.append(f"{res} | " + " | ".join(cells))
    return "\n".join(lines)


def welch_t_test(samples_a: Sequence[float], samples_b: Sequence[float]) -> Tuple[float, float]:
    """Unequal-variance t statistic and two-sided p-value."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    if va == 0 and vb == 0:
        raise ValueError("both samples have zero variance")
    se2 = va + vb
    t = float((a.mean() - b.mean()) / math.sqrt(se2))
    df = se2 ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    return t, t_two_sided_p(t, df)


def t_two_sided_p(t: float, df: float) -> float:
    return float(min(1.0, 2.0 * scipy.stats.t.sf(abs(t), df)))
