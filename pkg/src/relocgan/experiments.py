"""Desk-scale experiment protocol shared by the CLI and the acceptance suite.

Long runs are cached on disk under ``cache_dir`` keyed by a hash of everything
that determines their result, and snapshot themselves every few thousand steps
so an interrupted run resumes where it stopped (bit-identically, see
:mod:`relocgan.training`).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import atomic_write_text, from_uint8, render_domain
from .losses import LossWeights
from .metrics import RandomConvEncoder, encode, fid, intra_cluster_lpips, offset_stats
from .networks import ArchConfig, GeneratorBundle
from .relocation import extend, offsets_of
from .training import (OptimConfig, finetune_alpha, generate, pretrain, sample_images,
                       target_relocator, transfer)

log = logging.getLogger(__name__)

ARMS = ("constant", "scratch", "full_finetune_baseline", "unified", "adaptive",
        "constant+perp", "constant+cl", "constant->alpha")


@dataclass(frozen=True)
class DeskScale:
    # half the default widths: keeps 11 style rows of width 64 while fitting a CPU budget
    arch: ArchConfig = ArchConfig(channels=(64, 64, 32, 32))
    source_count: int = 5000
    source_seed: int = 100
    source_heldout_count: int = 1000
    target_style: str = "sketch"
    shots: int = 10
    target_seed: int = 200
    heldout_count: int = 1000
    heldout_seed: int = 300
    abundant_count: int = 1000
    pretrain_kimg: float = 200.0
    pretrain_seed: int = 0
    transfer_kimg: float = 40.0
    alpha_kimg: float = 10.0
    batch_size: int = 8
    fid_samples: int = 1000
    lpips_samples: int = 200
    encoder_seed: int = 1234
    eval_seed: int = 999
    weights: LossWeights = LossWeights()
    optim: OptimConfig = OptimConfig()
    cache_dir: str = "runs/desk"
    snapshot_steps: int = 1000

    def key(self, *parts) -> str:
        d = dataclasses.asdict(self)
        d.pop("cache_dir")
        d.pop("snapshot_steps")
        blob = json.dumps([d, parts], sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def source_key(self) -> str:
        d = dataclasses.asdict(self)
        keep = ("arch", "source_count", "source_seed", "pretrain_kimg", "pretrain_seed", "batch_size", "weights",
                "optim")
        blob = json.dumps({k: d[k] for k in keep}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


class Desk:
    """Lazily materialised datasets, source model and arm results for one :class:`DeskScale`."""

    def __init__(self, cfg: DeskScale = DeskScale()):
        self.cfg = cfg
        self.root = Path(cfg.cache_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self._cache: Dict[str, object] = {}
        self.encoder = RandomConvEncoder(cfg.encoder_seed, cfg.arch.resolution)

    # ------------------------------------------------------------------ data

    def _render(self, style: str, count: int, seed: int) -> torch.Tensor:
        key = (style, count, seed)
        if key not in self._cache:
            self._cache[key] = from_uint8(render_domain(style, count, seed, self.cfg.arch.resolution))
        return self._cache[key]

    def source_images(self) -> torch.Tensor:
        return self._render("source", self.cfg.source_count, self.cfg.source_seed)

    def source_heldout(self) -> torch.Tensor:
        return self._render("source", self.cfg.source_heldout_count, self.cfg.source_seed + 1)

    def fewshot(self, shots: Optional[int] = None) -> torch.Tensor:
        return self._render(self.cfg.target_style, self.cfg.shots, self.cfg.target_seed)[: shots or self.cfg.shots]

    def target_heldout(self) -> torch.Tensor:
        return self._render(self.cfg.target_style, self.cfg.heldout_count, self.cfg.heldout_seed)

    def abundant_target(self) -> torch.Tensor:
        return self._render(self.cfg.target_style, self.cfg.abundant_count, self.cfg.target_seed + 1)

    # ------------------------------------------------------------------ resumable runs

    def _resumable(self, name: str, run, snapshots: bool = True):
        """Run ``run(resume, callback)`` and cache the result as ``name``.

        With ``snapshots`` the callback writes a partial checkpoint every
        ``snapshot_steps`` steps and a later call resumes from it. Only runs
        whose whole state lives in the bundle (pretraining) can use this.
        """
        final = self.root / f"{name}.ckpt"
        if final.exists():
            return load_checkpoint(final)
        partial = self.root / f"{name}.partial.ckpt"
        resume = load_checkpoint(partial) if snapshots and partial.exists() else None
        every = self.cfg.snapshot_steps

        def callback(loop):
            if snapshots and loop.step % every == 0:
                save_checkpoint(Checkpoint(loop.bundle, state=loop.state(0.0), meta={"snapshot": True}), partial)

        ckpt = run(resume, callback)
        log.info("finished %s", name)
        save_checkpoint(ckpt, final)
        if partial.exists():
            partial.unlink()
        return ckpt

    def source_path(self) -> Path:
        """File of the cached source checkpoint (trained on first use)."""
        self.source()
        return self.root / f"source_{self.cfg.source_key()}.ckpt"

    def source(self) -> Checkpoint:
        cfg = self.cfg
        name = f"source_{cfg.source_key()}"
        if name in self._cache:
            return self._cache[name]

        def run(resume, callback):
            # snapshots only carry bundle + loop state, which is all pretraining needs
            return pretrain(self.source_images(), cfg.arch, cfg.pretrain_kimg, seed=cfg.pretrain_seed,
                            batch_size=cfg.batch_size, weights=cfg.weights, optim=cfg.optim, resume=resume,
                            callback=callback)

        ckpt = self._resumable(name, run)
        self._cache[name] = ckpt
        return ckpt

    def arm(self, arm: str, seed: int, target: Optional[torch.Tensor] = None, tag: str = "fewshot",
            kimg: Optional[float] = None) -> Checkpoint:
        cfg = self.cfg
        kimg = cfg.transfer_kimg if kimg is None else kimg
        name = f"arm_{arm.replace('+', 'P').replace('->', 'T')}_{tag}_s{seed}_{cfg.key(arm, seed, tag, kimg)}"
        if name in self._cache:
            return self._cache[name]
        images = self.fewshot() if target is None else target

        snapshots = arm == "scratch"
        if arm == "scratch":
            def run(resume, callback):
                return pretrain(images, cfg.arch, kimg, seed=seed, batch_size=cfg.batch_size,
                                weights=cfg.weights, optim=cfg.optim, resume=resume, callback=callback)
        elif arm == "constant->alpha":
            base = self.arm("constant", seed, target, tag, kimg)

            def run(resume, callback):
                return finetune_alpha(base, images, cfg.weights, cfg.alpha_kimg, seed=seed,
                                      batch_size=cfg.batch_size, optim=cfg.optim)
        else:
            src = self.source()

            def run(resume, callback):
                return transfer(src, images, arm, cfg.weights, kimg, seed=seed, batch_size=cfg.batch_size,
                                optim=cfg.optim)

        ckpt = self._resumable(name, run, snapshots)
        self._cache[name] = ckpt
        return ckpt

    # ------------------------------------------------------------------ evaluation

    def fid_proxy(self, images: torch.Tensor, reference: torch.Tensor) -> float:
        return fid(encode(images, self.encoder), encode(reference, self.encoder))

    def evaluate(self, ckpt: Checkpoint, fewshot: Optional[torch.Tensor] = None,
                 reference: Optional[torch.Tensor] = None) -> Dict[str, float]:
        cfg = self.cfg
        fewshot = self.fewshot() if fewshot is None else fewshot
        reference = self.target_heldout() if reference is None else reference
        gen = sample_images(ckpt, max(cfg.fid_samples, cfg.lpips_samples), cfg.eval_seed)
        return {
            "fid": self.fid_proxy(gen[: cfg.fid_samples], reference),
            "intra_lpips": intra_cluster_lpips(gen[: cfg.lpips_samples], fewshot, self.encoder),
        }

    def arm_metrics(self, arm: str, seed: int, kimg: Optional[float] = None) -> Dict[str, float]:
        cfg = self.cfg
        kimg = cfg.transfer_kimg if kimg is None else kimg
        path = self.root / f"metrics_{arm.replace('+', 'P').replace('->', 'T')}_s{seed}_{cfg.key(arm, seed, kimg)}.json"
        if path.exists():
            return json.loads(path.read_text())
        m = self.evaluate(self.arm(arm, seed, kimg=kimg))
        m.update({"arm": arm, "seed": seed, "kimg": kimg})
        atomic_write_text(path, json.dumps(m, indent=1, sort_keys=True))
        return m

    def source_quality(self) -> Dict[str, float]:
        """FID-proxy of the trained and of an untrained source model against held-out source renders."""
        cfg = self.cfg
        ref = self.source_heldout()
        trained = sample_images(self.source(), cfg.fid_samples, cfg.eval_seed)
        untrained = Checkpoint(GeneratorBundle.create(cfg.arch, cfg.pretrain_seed), meta={"mode": "source"})
        fresh = sample_images(untrained, cfg.fid_samples, cfg.eval_seed)
        return {"trained": self.fid_proxy(trained, ref), "untrained": self.fid_proxy(fresh, ref)}

    # ------------------------------------------------------------------ diagnostics

    def interpolation_curve(self, ckpt: Checkpoint, lambdas: Sequence[float], n_z: int = 32,
                            seed: int = 7) -> Tuple[List[float], torch.Tensor, torch.Tensor]:
        """Mean LPIPS to the source image at each lambda, plus the image rows."""
        from .metrics import LPIPS
        z = torch.randn(n_z, ckpt.arch.d_z, generator=torch.Generator().manual_seed(seed))
        metric = LPIPS(self.encoder)
        rows = []
        src = None
        for lam in lambdas:
            s, t = generate(ckpt, z, f"interpolate:{lam}")
            src = s
            rows.append(t)
        means = [float(np.mean(metric(r, src))) for r in rows]
        return means, src, torch.stack(rows)

    def offset_geometry(self, seed: int = 0):
        ckpt = self.arm("adaptive", seed, target=self.abundant_target(), tag="abundant")
        return offset_stats(sampled_offsets(ckpt), self.cfg.arch.layer_labels())


def sampled_offsets(ckpt: Checkpoint, n: int = 1000, seed: int = 11, domain: str = "target") -> np.ndarray:
    """(n, n_layers, d_w) per-sample offsets the checkpoint's relocation applies to random source codes."""
    rel = target_relocator(ckpt, domain)
    z = torch.randn(n, ckpt.arch.d_z, generator=torch.Generator().manual_seed(seed))
    with torch.no_grad():
        w = extend(ckpt.bundle.mapping(z), ckpt.arch.n_layers)
        off = offsets_of(rel, w) if isinstance(rel, nn.Module) else rel(w) - w
        return off.double().numpy()


def repeat_protocol(desk: Desk, arms: Sequence[str], repeat: int, kimg: float) -> Dict[str, List[Dict[str, float]]]:
    """Metrics of ``repeat`` seeds per arm (seeds 0..repeat-1)."""
    return {arm: [desk.arm_metrics(arm, s, kimg=kimg) for s in range(repeat)] for arm in arms}


def run_all(cache_dir: str = "runs/desk", seeds: Sequence[int] = (0, 1, 2)) -> None:
    """Materialise every cached result the acceptance suite reads, cheapest-first after the source."""
    desk = Desk(DeskScale(cache_dir=cache_dir))
    log.info("source quality %s", desk.source_quality())
    for arm in ("constant", "full_finetune_baseline", "unified", "adaptive", "scratch"):
        for s in seeds:
            log.info("%s seed %d: %s", arm, s, desk.arm_metrics(arm, s))
    desk.offset_geometry()


if __name__ == "__main__":
    import sys
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    run_all(*sys.argv[1:2])
