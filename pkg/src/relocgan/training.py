"""Source pretraining, offset transfer, intensity finetuning and generation.

All phases share one alternating G/D loop (:class:`GANLoop`). A phase is fully
described by which generator-side modules train and how target codes are built
from source codes; the loop itself knows nothing about the transfer method.

Determinism: every random draw in a run (latents, real-batch indices,
path-length noise) comes from one ``torch.Generator`` whose state is part of
the checkpoint, and each step's behaviour depends only on the step index, so a
resumed run continues bit for bit.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint, TrainingState
from .losses import (FreezePolicy, LossWeights, adv_losses, alpha_reg, apply_freeze, contrastive_loss,
                     path_length_penalty, perp_loss_simplified, r1_penalty)
from .networks import ArchConfig, ConfigError, GeneratorBundle
from .relocation import AdaptiveOffsetNets, AlphaModules, DeltaW, UnifiedDelta, extend, interpolate, relocate_alpha

log = logging.getLogger(__name__)

TRANSFER_MODES = ("constant", "constant+perp", "constant+cl", "unified", "adaptive", "full_finetune_baseline")


class TransferError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 2.5e-3
    lr_alpha: float = 2.5e-4
    betas: Tuple[float, float] = (0.0, 0.99)
    eps: float = 1e-8


@dataclass
class Phase:
    """What trains in one run of the loop."""

    name: str
    g_modules: Dict[str, nn.Module]
    g_lr: float
    make_target: Callable[[torch.Tensor], Tuple[torch.Tensor, Dict[str, torch.Tensor]]]
    train_mapping: bool = False
    perp_offset: Optional[Callable[[], torch.Tensor]] = None
    use_cl: bool = False
    use_alpha_reg: bool = False


def steps_for(kimg: float, batch_size: int) -> int:
    return int(math.ceil(kimg * 1000.0 / batch_size - 1e-9))


class GANLoop:
    def __init__(self, bundle: GeneratorBundle, images: torch.Tensor, phase: Phase, weights: LossWeights,
                 optim: OptimConfig, batch_size: int, seed: int, freeze: FreezePolicy = FreezePolicy()):
        if images.shape[0] < 1:
            raise TransferError("empty dataset")
        self.bundle = bundle
        self.images = images
        self.phase = phase
        self.weights = weights
        self.optim = optim
        self.batch_size = batch_size
        self.seed = seed
        self.freeze = freeze
        self.D = bundle.discriminator
        apply_freeze(self.D, freeze)
        self.g_params = [p for m in phase.g_modules.values() for p in m.parameters() if p.requires_grad]
        self.d_params = [p for p in self.D.parameters() if p.requires_grad]
        self.opt_g = torch.optim.Adam(self.g_params, lr=phase.g_lr, betas=optim.betas, eps=optim.eps) \
            if self.g_params else None
        self.opt_d = torch.optim.Adam(self.d_params, lr=optim.lr, betas=optim.betas, eps=optim.eps) \
            if self.d_params else None
        self.gen = torch.Generator().manual_seed(seed)
        self.step = 0
        self.images_seen = 0
        self.pl_mean = torch.zeros(())
        self.history: List[Dict[str, float]] = []

    # ------------------------------------------------------------------ state

    def state(self, budget_kimg: float) -> TrainingState:
        opts = {}
        if self.opt_g is not None:
            opts["g"] = copy.deepcopy(self.opt_g.state_dict())
        if self.opt_d is not None:
            opts["d"] = copy.deepcopy(self.opt_d.state_dict())
        return TrainingState(step=self.step, images_seen=self.images_seen, budget_kimg=budget_kimg,
                             seed=self.seed, pl_mean=float(self.pl_mean), rng_state=self.gen.get_state(),
                             optimizers=opts, phase=self.phase.name)

    def restore(self, st: TrainingState) -> None:
        if st.phase != self.phase.name:
            raise TransferError(f"cannot resume phase {self.phase.name!r} from state of {st.phase!r}")
        self.step = st.step
        self.images_seen = st.images_seen
        self.pl_mean = torch.tensor(st.pl_mean, dtype=torch.float32)
        if st.rng_state is not None:
            self.gen.set_state(st.rng_state)
        if "g" in st.optimizers and self.opt_g is not None:
            self.opt_g.load_state_dict(st.optimizers["g"])
        if "d" in st.optimizers and self.opt_d is not None:
            self.opt_d.load_state_dict(st.optimizers["d"])

    # ------------------------------------------------------------------ helpers

    def _w_src(self, n: int) -> torch.Tensor:
        arch = self.bundle.arch
        z = torch.randn(n, arch.d_z, generator=self.gen)
        if self.phase.train_mapping:
            w = self.bundle.mapping(z)
        else:
            with torch.no_grad():
                w = self.bundle.mapping(z)
        return w

    def _real_batch(self) -> torch.Tensor:
        idx = torch.randint(self.images.shape[0], (self.batch_size,), generator=self.gen)
        return self.images[idx]

    # ------------------------------------------------------------------ one step

    def train_step(self) -> Dict[str, float]:
        arch = self.bundle.arch
        S, D, ph, lw = self.bundle.synthesis, self.D, self.phase, self.weights
        stats: Dict[str, float] = {}

        # generator
        w = self._w_src(self.batch_size)
        w_src = extend(w, arch.n_layers)
        w_tgt, aux = ph.make_target(w_src)
        if ph.use_cl:
            fake, g_feats = S(w_tgt, return_features=True)
            with torch.no_grad():
                src_img, src_feats = S(w_src, return_features=True)
        else:
            fake = S(w_tgt)
        if self.opt_g is not None:
            fake_logits = D(fake)
            loss_g = F.softplus(-fake_logits).mean()
            stats["loss_g"] = loss_g.item()
            if ph.perp_offset is not None and lw.lambda_perp > 0:
                lp = perp_loss_simplified(ph.perp_offset(), w.detach())
                stats["perp"] = lp.item()
                loss_g = loss_g + lw.lambda_perp * lp
            if ph.use_alpha_reg and "alpha" in aux:
                la = alpha_reg(aux["alpha"])
                stats["alpha_reg"] = la.item()
                loss_g = loss_g + lw.lambda_alpha_reg * la
            if ph.use_cl and lw.lambda_cl > 0:
                lcl = contrastive_loss(src_feats, g_feats)
                stats["cl_g"] = lcl.item()
                loss_g = loss_g + lw.lambda_cl * lcl
            self.opt_g.zero_grad(set_to_none=True)
            loss_g.backward()
            self.opt_g.step()

            if lw.use_pl and lw.pl_weight > 0 and self.step % lw.pl_interval == 0:
                n = max(1, self.batch_size // 2)
                w_pl = extend(self._w_src(n), arch.n_layers)
                w_pl_tgt, _ = ph.make_target(w_pl)
                if not w_pl_tgt.requires_grad:
                    w_pl_tgt = w_pl_tgt.detach().requires_grad_(True)
                pen, self.pl_mean = path_length_penalty(w_pl_tgt, S, self.pl_mean, lw.pl_decay, generator=self.gen)
                stats["pl"] = pen.item()
                self.opt_g.zero_grad(set_to_none=True)
                (pen * lw.pl_weight * lw.pl_interval).backward()
                self.opt_g.step()
            self.opt_g.zero_grad(set_to_none=True)

        # discriminator
        real = self._real_batch()
        if self.opt_d is not None:
            fake_d = fake.detach()
            real_logits = D(real)
            fake_logits_d = D(fake_d)
            loss_d, _ = adv_losses(real_logits, fake_logits_d, fake_logits_d.detach())
            stats["loss_d"] = loss_d.item()
            if lw.gamma_r1 > 0:
                r1 = r1_penalty(real, D, lw.gamma_r1)
                stats["r1"] = r1.item()
                loss_d = loss_d + r1
            if ph.use_cl and lw.lambda_cl > 0:
                _, d_tgt = D(fake_d, return_features=True)
                _, d_src = D(src_img, return_features=True)
                lcl_d = contrastive_loss(d_src, d_tgt)
                stats["cl_d"] = lcl_d.item()
                loss_d = loss_d + lw.lambda_cl * lcl_d
            self.opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            self.opt_d.step()
            self.opt_d.zero_grad(set_to_none=True)

        self.step += 1
        self.images_seen += self.batch_size
        return stats

    def run(self, budget_kimg: float, log_every: int = 500,
            callback: Optional[Callable[["GANLoop"], None]] = None, stop_at: Optional[int] = None) -> None:
        total = steps_for(budget_kimg, self.batch_size)
        if stop_at is not None:
            total = min(total, stop_at)
        while self.step < total:
            stats = self.train_step()
            if log_every and (self.step % log_every == 0 or self.step == total):
                log.info("%s step %d/%d kimg %.1f %s", self.phase.name, self.step, total, self.images_seen / 1000,
                         " ".join(f"{k}={v:.4f}" for k, v in stats.items()))
                self.history.append({"step": self.step, **stats})
            if callback is not None:
                callback(self)
            if self.bundle.frozen:
                # cheap enough at this scale to verify every few hundred steps
                if self.step % 500 == 0:
                    self.bundle.check_frozen()


# ====================================================================== phases


def _identity_target(w_src):
    return w_src, {}


def _module_target(module: nn.Module):
    def make(w_src):
        return module(w_src), {}
    return make


def build_relocator(mode: str, arch: ArchConfig, seed: int = 0) -> Optional[nn.Module]:
    """Freshly initialised generator-side trainable module for a transfer mode."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if mode in ("constant", "constant+perp", "constant+cl"):
            return DeltaW.for_arch(arch)
        if mode == "unified":
            return UnifiedDelta(arch.d_w)
        if mode == "adaptive":
            return AdaptiveOffsetNets.for_arch(arch)
    if mode == "full_finetune_baseline":
        return None
    raise TransferError(f"unknown transfer mode {mode!r}")


def relocator_key(mode: str) -> str:
    return {"unified": "unified", "adaptive": "adaptive"}.get(mode, "delta")


def pretrain(images: torch.Tensor, arch: ArchConfig, budget_kimg: float, seed: int = 0, batch_size: int = 8,
             weights: Optional[LossWeights] = None, optim: Optional[OptimConfig] = None,
             resume: Optional[Checkpoint] = None, stop_at: Optional[int] = None,
             callback=None, log_every: int = 500) -> Checkpoint:
    """Train mapping, synthesis and discriminator from scratch on ``images``."""
    weights = weights or LossWeights()
    optim = optim or OptimConfig()
    if images.shape[0] < batch_size:
        raise TransferError(f"dataset has {images.shape[0]} images, fewer than the batch size {batch_size}")
    if images.shape[0] < 1000:
        log.warning("pretraining on only %d images", images.shape[0])
    bundle = copy.deepcopy(resume.bundle) if resume is not None else GeneratorBundle.create(arch, seed)
    phase = Phase("pretrain", {"mapping": bundle.mapping, "synthesis": bundle.synthesis}, optim.lr,
                  _identity_target, train_mapping=True)
    loop = GANLoop(bundle, images, phase, weights, optim, batch_size, seed)
    if resume is not None:
        loop.restore(resume.state)
    loop.run(budget_kimg, log_every=log_every, callback=callback, stop_at=stop_at)
    return Checkpoint(bundle, state=loop.state(budget_kimg), meta={"mode": "source", "history": loop.history[-20:]})


def _transfer_phase(bundle: GeneratorBundle, mode: str, relocator: Optional[nn.Module], optim: OptimConfig) -> Phase:
    if mode == "full_finetune_baseline":
        for p in list(bundle.mapping.parameters()) + list(bundle.synthesis.parameters()):
            p.requires_grad_(True)
        return Phase("transfer:" + mode, {"mapping": bundle.mapping, "synthesis": bundle.synthesis}, optim.lr,
                     _identity_target, train_mapping=True)
    bundle.freeze_generator()
    perp = (lambda: relocator.offset) if mode == "constant+perp" else None
    return Phase("transfer:" + mode, {relocator_key(mode): relocator}, optim.lr, _module_target(relocator),
                 perp_offset=perp, use_cl=(mode == "constant+cl"))


def transfer(src: Checkpoint, fewshot: torch.Tensor, mode: str = "constant", weights: Optional[LossWeights] = None,
             budget_kimg: float = 40.0, seed: int = 0, batch_size: int = 8, domain: str = "target",
             freeze: FreezePolicy = FreezePolicy(), optim: Optional[OptimConfig] = None,
             resume: Optional[Checkpoint] = None, stop_at: Optional[int] = None, callback=None,
             log_every: int = 500) -> Checkpoint:
    """Adapt a source checkpoint to ``fewshot`` images.

    In the offset modes the mapping and synthesis networks are frozen and only
    the relocation module (plus the unfrozen discriminator layers) trains.
    """
    weights = weights or LossWeights()
    optim = optim or OptimConfig()
    if mode == "constant->alpha":
        raise TransferError("the alpha phase needs a learned offset; run transfer() then finetune_alpha()")
    if mode not in TRANSFER_MODES:
        raise TransferError(f"unknown transfer mode {mode!r}")
    if fewshot.shape[0] < 1:
        raise TransferError("empty few-shot dataset")
    base = resume if resume is not None else src
    bundle = copy.deepcopy(base.bundle)
    bundle.frozen = False
    relocator = build_relocator(mode, bundle.arch, seed)
    if resume is not None and relocator is not None:
        _load_relocator(relocator, resume, mode, domain)
    if resume is not None and mode == "full_finetune_baseline":
        _load_finetuned(bundle, resume, domain)
    phase = _transfer_phase(bundle, mode, relocator, optim)
    loop = GANLoop(bundle, fewshot, phase, weights, optim, batch_size, seed, freeze)
    if resume is not None:
        loop.restore(resume.state)
    loop.run(budget_kimg, log_every=log_every, callback=callback, stop_at=stop_at)

    deltas = dict(src.deltas)
    modules = {k: v for k, v in src.modules.items()}
    if mode in ("constant", "constant+perp", "constant+cl"):
        deltas[domain] = relocator.offset.detach().clone()
    elif relocator is not None:
        modules[f"{relocator_key(mode)}:{domain}"] = {k: v.detach().clone() for k, v in relocator.state_dict().items()}
    else:
        # the finetuned generator is stored beside the untouched source networks
        modules[f"finetuned:{domain}"] = {k: v.detach().clone() for k, v in _generator_state(bundle).items()}
        _restore_source(bundle, src.bundle)
    meta = {"mode": mode, "domain": domain, "freeze_d": freeze.frozen_layer_count, "source_step": src.state.step,
            "history": loop.history[-20:]}
    return Checkpoint(bundle, deltas, modules, loop.state(budget_kimg), dict(src.config), meta)


def _generator_state(bundle: GeneratorBundle) -> Dict[str, torch.Tensor]:
    state = {f"mapping.{k}": v for k, v in bundle.mapping.state_dict().items()}
    state.update({f"synthesis.{k}": v for k, v in bundle.synthesis.state_dict().items()})
    return state


def _load_generator_state(bundle: GeneratorBundle, state: Dict[str, torch.Tensor]) -> None:
    for name, net in (("mapping", bundle.mapping), ("synthesis", bundle.synthesis)):
        pre = name + "."
        net.load_state_dict({k[len(pre):]: v for k, v in state.items() if k.startswith(pre)})


def _load_finetuned(bundle: GeneratorBundle, ckpt: Checkpoint, domain: str) -> None:
    key = f"finetuned:{domain}"
    if key not in ckpt.modules:
        raise TransferError(f"checkpoint has no {key!r} section")
    _load_generator_state(bundle, ckpt.modules[key])


def _restore_source(bundle: GeneratorBundle, source: GeneratorBundle) -> None:
    _load_generator_state(bundle, _generator_state(source))
    bundle.freeze_generator()


def finetuned_bundle(ckpt: Checkpoint, domain: str = "target") -> GeneratorBundle:
    """A copy of the checkpoint's bundle carrying the finetuned baseline generator."""
    bundle = copy.deepcopy(ckpt.bundle)
    _load_finetuned(bundle, ckpt, domain)
    return bundle


def _load_relocator(relocator: nn.Module, ckpt: Checkpoint, mode: str, domain: str) -> None:
    if isinstance(relocator, DeltaW):
        if domain not in ckpt.deltas:
            raise TransferError(f"no offset for domain {domain!r} in checkpoint")
        with torch.no_grad():
            relocator.offset.copy_(ckpt.deltas[domain])
    else:
        key = f"{relocator_key(mode)}:{domain}"
        if key not in ckpt.modules:
            raise TransferError(f"checkpoint has no {key!r} section")
        relocator.load_state_dict(ckpt.modules[key])


def finetune_alpha(ckpt: Checkpoint, fewshot: torch.Tensor, weights: Optional[LossWeights] = None,
                   budget_kimg: float = 10.0, seed: int = 0, batch_size: int = 8, domain: str = "target",
                   freeze: FreezePolicy = FreezePolicy(), optim: Optional[OptimConfig] = None,
                   resume: Optional[Checkpoint] = None, stop_at: Optional[int] = None,
                   log_every: int = 500) -> Checkpoint:
    """Train per-block intensity modules on top of a fixed learned offset.

    The discriminator continues from the state stored in ``ckpt``.
    """
    weights = weights or LossWeights()
    optim = optim or OptimConfig()
    if domain not in ckpt.deltas:
        raise TransferError(f"no learned offset for domain {domain!r}; run a constant transfer first")
    if fewshot.shape[0] < 1:
        raise TransferError("empty few-shot dataset")
    base = resume if resume is not None else ckpt
    bundle = copy.deepcopy(base.bundle)
    bundle.freeze_generator()
    delta = ckpt.deltas[domain].detach().clone()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        alphas = AlphaModules.for_arch(bundle.arch)
    if resume is not None:
        alphas.load_state_dict(resume.modules[f"alpha:{domain}"])

    def make(w_src):
        a = alphas.alphas(w_src)
        return relocate_alpha(w_src, delta, alphas, alpha_values=a), {"alpha": a}

    phase = Phase("alpha", {"alpha": alphas}, optim.lr_alpha, make, use_alpha_reg=True)
    loop = GANLoop(bundle, fewshot, phase, weights, optim, batch_size, seed, freeze)
    if resume is not None:
        loop.restore(resume.state)
    loop.run(budget_kimg, log_every=log_every, stop_at=stop_at)
    modules = dict(ckpt.modules)
    modules[f"alpha:{domain}"] = {k: v.detach().clone() for k, v in alphas.state_dict().items()}
    meta = dict(ckpt.meta)
    meta.update({"mode": "constant->alpha", "history": loop.history[-20:]})
    return Checkpoint(bundle, dict(ckpt.deltas), modules, loop.state(budget_kimg), dict(ckpt.config), meta)


# ====================================================================== generation


def load_alpha_modules(ckpt: Checkpoint, domain: str = "target") -> AlphaModules:
    key = f"alpha:{domain}"
    if key not in ckpt.modules:
        raise TransferError(f"checkpoint has no alpha modules for domain {domain!r}")
    mods = AlphaModules.for_arch(ckpt.arch)
    mods.load_state_dict(ckpt.modules[key])
    return mods


def target_relocator(ckpt: Checkpoint, domain: str = "target") -> Callable[[torch.Tensor], torch.Tensor]:
    """The source->target code map a checkpoint's mode implies."""
    mode = ckpt.meta.get("mode", "source")
    if mode == "source":
        return lambda w: w
    if mode == "full_finetune_baseline":
        raise TransferError("the finetuned baseline changes the generator, not the codes; it has no code map")
    if mode == "constant->alpha":
        mods = load_alpha_modules(ckpt, domain)
        delta = ckpt.deltas[domain]
        return lambda w: relocate_alpha(w, delta, mods)
    if mode in ("unified", "adaptive"):
        rel = build_relocator(mode, ckpt.arch)
        rel.load_state_dict(ckpt.modules[f"{relocator_key(mode)}:{domain}"])
        return rel
    if domain not in ckpt.deltas:
        raise TransferError(f"checkpoint has no offset for domain {domain!r}")
    rel = DeltaW(*ckpt.deltas[domain].shape)
    with torch.no_grad():
        rel.offset.copy_(ckpt.deltas[domain])
    return rel.requires_grad_(False)


@torch.no_grad()
def generate(ckpt: Checkpoint, z: torch.Tensor, edit: str = "constant",
             domain: str = "target") -> Tuple[torch.Tensor, torch.Tensor]:
    """Paired source/target images for the same ``z`` rows.

    ``edit`` is one of ``none``, ``constant``, ``alpha``, ``target`` (whatever
    relocation the checkpoint was trained with) or ``interpolate:<lambda>``.
    """
    b = ckpt.bundle
    w_src = extend(b.mapping(z), b.arch.n_layers)
    if edit == "none":
        w_tgt = w_src
    elif edit == "constant":
        if domain not in ckpt.deltas:
            raise TransferError(f"checkpoint has no offset for domain {domain!r}")
        w_tgt = w_src + ckpt.deltas[domain]
    elif edit == "alpha":
        if domain not in ckpt.deltas:
            raise TransferError(f"checkpoint has no offset for domain {domain!r}")
        w_tgt = relocate_alpha(w_src, ckpt.deltas[domain], load_alpha_modules(ckpt, domain))
    elif edit == "target" and ckpt.meta.get("mode") == "full_finetune_baseline":
        tuned = finetuned_bundle(ckpt, domain)
        return b.synthesis(w_src), tuned.synthesis(extend(tuned.mapping(z), b.arch.n_layers))
    elif edit == "target":
        w_tgt = target_relocator(ckpt, domain)(w_src)
    elif edit.startswith("interpolate:"):
        if domain not in ckpt.deltas:
            raise TransferError(f"checkpoint has no offset for domain {domain!r}")
        w_tgt = interpolate(w_src, ckpt.deltas[domain], float(edit.split(":", 1)[1]))
    else:
        raise TransferError(f"unknown edit {edit!r}")
    src = b.synthesis(w_src)
    tgt = src if w_tgt is w_src else b.synthesis(w_tgt)
    return src, tgt


@torch.no_grad()
def sample_images(ckpt: Checkpoint, n: int, seed: int, edit: str = "target", domain: str = "target",
                  batch: int = 250) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(n, ckpt.arch.d_z, generator=gen)
    out = []
    for i in range(0, n, batch):
        out.append(generate(ckpt, z[i:i + batch], edit, domain)[1])
    return torch.cat(out)


def generator_trainable_count(mode: str, arch: ArchConfig) -> int:
    """Trainable generator-side parameters of a transfer mode."""
    if mode == "full_finetune_baseline":
        b = GeneratorBundle.create(arch)
        return b.generator_parameter_count()
    rel = build_relocator(mode, arch)
    return sum(p.numel() for p in rel.parameters())
