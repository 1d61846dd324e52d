"""Command-line entry point: ``relocgan <subcommand> [options]``.

Every subcommand that trains or evaluates reads a run config (``--config``,
optionally patched with ``--set key=value``) and writes into the config's run
directory. File names carry the config hash so outputs of different configs
never collide, and metric files also record it in their contents.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from .checkpoint import CheckpointError, export_delta, load_checkpoint, save_checkpoint
from .config import MODES, RunConfig
from .data import DatasetError, STYLES, atomic_write_text, emit_grid, ingest_folder, make_synthetic_domain
from .losses import FreezePolicy
from .metrics import (MetricReport, RandomConvEncoder, encode, fid, format_offset_table, intra_cluster_lpips, kid,
                      lpips, offset_stats, welch_t_test)
from .networks import ConfigError
from .training import OptimConfig, TransferError, finetune_alpha, generate, pretrain, sample_images, transfer

log = logging.getLogger("relocgan")

EXPECTED_ERRORS = (ConfigError, DatasetError, CheckpointError, TransferError, FileNotFoundError)


# --------------------------------------------------------------------------- helpers


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None):
        overrides["mode.name"] = args.mode
    if getattr(args, "freeze_d", None) is not None:
        overrides["mode.freeze_d"] = args.freeze_d
    return cfg.with_overrides(**overrides) if overrides else cfg


def _run_dir(cfg: RunConfig) -> Path:
    out = cfg.run_dir()
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / f"config-{cfg.config_hash()}.cfg", cfg.to_text())
    return out


def _optim(cfg: RunConfig) -> OptimConfig:
    o = cfg.optim
    return OptimConfig(lr=o.lr, lr_alpha=o.lr_alpha, betas=(o.beta1, o.beta2))


def _images(folder: str, cfg: RunConfig, what: str, shots: int = 0) -> torch.Tensor:
    if not folder:
        raise ConfigError(f"config has no data.{what} set")
    manifest = ingest_folder(folder, cfg.arch.resolution)
    images = manifest.load()
    if shots:
        if shots > len(images):
            raise DatasetError(f"{folder} holds {len(images)} images, fewer than data.shots = {shots}")
        images = images[:shots]
    return images


def _write_reports(out: Path, stem: str, reports: Sequence[MetricReport]) -> Path:
    """Tab-separated table plus a JSON twin of the same reports."""
    cols = ["metric", "value", "n_a", "n_b", "encoder_id", "config_hash"]
    lines = ["\t".join(cols)]
    for r in reports:
        lines.append("\t".join([r.metric, repr(float(r.value)), str(r.n_a), str(r.n_b), r.encoder_id, r.config_hash]))
    tsv = out / f"{stem}.tsv"
    atomic_write_text(tsv, "\n".join(lines) + "\n")
    atomic_write_text(out / f"{stem}.json", json.dumps([r.__dict__ for r in reports], indent=1, sort_keys=True))
    return tsv


def _parse_floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse number list {text!r}") from exc


# --------------------------------------------------------------------------- subcommands


def cmd_make_data(args) -> int:
    manifest = make_synthetic_domain(args.out, args.style, args.count, args.seed, args.resolution, args.split)
    print(f"wrote {len(manifest)} images ({args.style}) to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    out = _run_dir(cfg)
    images = _images(cfg.data.source_dir, cfg, "source_dir")
    kimg = cfg.budget.pretrain_kimg if args.kimg is None else args.kimg
    ckpt = pretrain(images, cfg.arch, kimg, seed=cfg.seed, batch_size=cfg.budget.batch_size,
                    weights=cfg.loss_weights, optim=_optim(cfg))
    ckpt.config = cfg.to_flat()
    path = save_checkpoint(ckpt, out / f"source-{cfg.config_hash()}.ckpt")
    print(path)
    return 0


def _transfer_one(cfg: RunConfig, source, fewshot: torch.Tensor, mode: str, seed: int, kimg: Optional[float] = None):
    kimg = cfg.budget.kimg if kimg is None else kimg
    freeze = FreezePolicy(cfg.mode.freeze_d)
    common = dict(weights=cfg.loss_weights, seed=seed, batch_size=cfg.budget.batch_size, domain=cfg.data.domain,
                  freeze=freeze, optim=_optim(cfg))
    base_mode = "constant" if mode == "constant->alpha" else mode
    ckpt = transfer(source, fewshot, base_mode, budget_kimg=kimg, **common)
    if mode == "constant->alpha":
        ckpt = finetune_alpha(ckpt, fewshot, budget_kimg=cfg.budget.alpha_kimg, **common)
    ckpt.config = cfg.to_flat()
    return ckpt


def cmd_transfer(args) -> int:
    cfg = _load_config(args)
    out = _run_dir(cfg)
    source = load_checkpoint(args.source)
    fewshot = _images(cfg.data.target_dir, cfg, "target_dir", cfg.data.shots)
    ckpt = _transfer_one(cfg, source, fewshot, cfg.mode.name, cfg.seed, args.kimg)
    h = cfg.config_hash()
    path = save_checkpoint(ckpt, out / f"transfer-{h}.ckpt")
    print(path)
    if cfg.data.domain in ckpt.deltas:
        print(export_delta(ckpt.deltas[cfg.data.domain], out / f"delta-{cfg.data.domain}-{h}.dltw"))
    return 0


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = _run_dir(cfg)
    ckpt = load_checkpoint(args.ckpt)
    z = torch.randn(args.n, ckpt.arch.d_z, generator=torch.Generator().manual_seed(cfg.seed))
    src, tgt = generate(ckpt, z, args.edit, cfg.data.domain)
    path = emit_grid([list(src), list(tgt)], out / f"generate-{args.edit.replace(':', '_')}-{cfg.config_hash()}.png")
    print(path)
    return 0


def cmd_interpolate(args) -> int:
    cfg = _load_config(args)
    out = _run_dir(cfg)
    ckpt = load_checkpoint(args.ckpt)
    lambdas = _parse_floats(args.lambdas)
    if not lambdas:
        raise ConfigError("--lambdas is empty")
    z = torch.randn(args.n, ckpt.arch.d_z, generator=torch.Generator().manual_seed(cfg.seed))
    encoder = RandomConvEncoder(cfg.eval.encoder_seed, ckpt.arch.resolution)
    rows, lines = [], ["lambda\tmean_lpips_to_source"]
    for lam in sorted(lambdas):
        src, img = generate(ckpt, z, f"interpolate:{lam}", cfg.data.domain)
        rows.append(list(img))
        lines.append(f"{lam!r}\t{float(lpips(img, src, encoder).mean())!r}")
    h = cfg.config_hash()
    atomic_write_text(out / f"interpolate-{h}.tsv", "\n".join(lines) + "\n")
    print(emit_grid(rows, out / f"interpolate-{h}.png"))
    return 0


def _metric_reports(ckpt, cfg: RunConfig, fewshot: torch.Tensor, heldout: torch.Tensor, seed: int,
                    encoder: RandomConvEncoder) -> List[MetricReport]:
    e = cfg.eval
    gen = sample_images(ckpt, max(e.fid_samples, e.lpips_samples), seed, domain=cfg.data.domain)
    feats_gen = encode(gen[:e.fid_samples], encoder)
    feats_ref = encode(heldout, encoder)
    h, eid = cfg.config_hash(), encoder.encoder_id
    n_gen, n_ref = len(feats_gen), len(feats_ref)
    return [
        MetricReport("fid", fid(feats_gen, feats_ref), n_gen, n_ref, eid, h),
        # thousandths, the customary KID scale
        MetricReport("kid_x1e3", 1e3 * kid(feats_gen, feats_ref), n_gen, n_ref, eid, h),
        MetricReport("intra_lpips", intra_cluster_lpips(gen[:e.lpips_samples], fewshot, encoder),
                     e.lpips_samples, len(fewshot), eid, h),
    ]


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _run_dir(cfg)
    h = cfg.config_hash()
    repeat = args.repeat if args.repeat is not None else cfg.eval.repeat
    fewshot = _images(cfg.data.target_dir, cfg, "target_dir", cfg.data.shots)
    heldout = _images(cfg.data.heldout_dir, cfg, "heldout_dir")
    encoder = RandomConvEncoder(cfg.eval.encoder_seed, cfg.arch.resolution)

    if args.ckpt:
        if args.welch or args.arms:
            raise ConfigError("--ckpt evaluates one checkpoint; --arms/--welch need --source instead")
        ckpt = load_checkpoint(args.ckpt)
        print(_write_reports(out, f"eval-{h}", _metric_reports(ckpt, cfg, fewshot, heldout, cfg.seed, encoder)))
        return 0

    if not args.source:
        raise ConfigError("eval needs --ckpt, or --source to train and compare transfer arms")
    arms = [a.strip() for a in (args.arms or cfg.mode.name).split(",") if a.strip()]
    for a in arms:
        if a not in MODES:
            raise ConfigError(f"unknown arm {a!r}; choose from {', '.join(MODES)}")
    if args.welch and (len(arms) < 2 or repeat < 2):
        raise ConfigError("--welch needs at least two arms and --repeat >= 2")
    source = load_checkpoint(args.source)
    seeds = [cfg.seed + i for i in range(repeat)]
    values: Dict[str, Dict[str, List[float]]] = {}
    lines = ["arm\tseed\tmetric\tvalue\tconfig_hash"]
    for arm in arms:
        per_metric = values.setdefault(arm, {})
        if arm in values and per_metric:
            continue  # repeated arm name: identical runs, reuse
        for s in seeds:
            log.info("eval: arm %s seed %d", arm, s)
            ckpt = _transfer_one(cfg, source, fewshot, arm, s, args.kimg)
            for r in _metric_reports(ckpt, cfg, fewshot, heldout, s, encoder):
                per_metric.setdefault(r.metric, []).append(r.value)
                lines.append(f"{arm}\t{s}\t{r.metric}\t{r.value!r}\t{h}")
    atomic_write_text(out / f"eval-repeat-{h}.tsv", "\n".join(lines) + "\n")
    print(out / f"eval-repeat-{h}.tsv")

    if args.welch:
        reports = []
        for a, b in combinations(range(len(arms)), 2):
            for metric in values[arms[a]]:
                xa, xb = values[arms[a]][metric], values[arms[b]][metric]
                try:
                    t, p = welch_t_test(xa, xb)
                except ValueError:
                    # both arms constant across seeds: equal means give no evidence of a difference
                    t, p = (0.0, 1.0) if xa[0] == xb[0] else (float("inf"), 0.0)
                reports.append(MetricReport(f"welch:{metric}:{arms[a]}|{arms[b]}", t, len(xa), len(xb),
                                            encoder.encoder_id, h, {"t": t, "p": p}))
                print(f"{metric}\t{arms[a]} vs {arms[b]}\tt={t:.4f}\tp={p:.4f}")
        tsv = out / f"welch-{h}.tsv"
        rows = ["metric\tarm_a\tarm_b\tt\tp\tn_a\tn_b\tconfig_hash"]
        for r in reports:
            _, metric, pair = r.metric.split(":", 2)
            arm_a, arm_b = pair.split("|")
            rows.append(f"{metric}\t{arm_a}\t{arm_b}\t{r.extra['t']!r}\t{r.extra['p']!r}\t{r.n_a}\t{r.n_b}\t{h}")
        atomic_write_text(tsv, "\n".join(rows) + "\n")
        atomic_write_text(out / f"welch-{h}.json", json.dumps([r.__dict__ for r in reports], indent=1,
                                                                sort_keys=True))
        print(tsv)
    return 0


def cmd_diagnose(args) -> int:
    from .experiments import sampled_offsets
    cfg = _load_config(args)
    out = _run_dir(cfg)
    ckpt = load_checkpoint(args.ckpt)
    offsets = sampled_offsets(ckpt, args.samples, cfg.seed, cfg.data.domain)
    rows = offset_stats(offsets, ckpt.arch.layer_labels())
    table = format_offset_table(rows)
    h = cfg.config_hash()
    lines = ["resolution\tkind\tcosine\tl1\tn_samples\tconfig_hash"]
    lines += [f"{r.resolution}\t{r.kind}\t{r.cosine!r}\t{r.l1!r}\t{r.n_samples}\t{h}" for r in rows]
    atomic_write_text(out / f"diagnose-{h}.tsv", "\n".join(lines) + "\n")
    atomic_write_text(out / f"diagnose-{h}.txt", table + "\n")
    print(table)
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relocgan", description="Few-shot generator transfer by latent offsets.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def with_config(p):
        p.add_argument("--config", help="run config file (key = value lines)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, help="override the config seed")
        return p

    p = sub.add_parser("make-data", help="render a procedural image domain")
    p.add_argument("--out", required=True)
    p.add_argument("--style", required=True, choices=sorted(STYLES) + ["mixed"])
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--split", default=None)
    p.set_defaults(func=cmd_make_data)

    p = with_config(sub.add_parser("pretrain", help="train the source generator"))
    p.add_argument("--kimg", type=float, help="override budget.pretrain_kimg")
    p.set_defaults(func=cmd_pretrain)

    p = with_config(sub.add_parser("transfer", help="adapt a source checkpoint to few-shot target images"))
    p.add_argument("--source", required=True, help="source checkpoint")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--freeze-d", type=int, dest="freeze_d")
    p.add_argument("--kimg", type=float, help="override budget.kimg")
    p.set_defaults(func=cmd_transfer)

    p = with_config(sub.add_parser("generate", help="paired source/target sample grid"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--edit", default="target", help="none | constant | alpha | target | interpolate:<lambda>")
    p.set_defaults(func=cmd_generate)

    p = with_config(sub.add_parser("interpolate", help="sweep the offset strength"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lambdas", default="-0.25,0,0.25,0.5,0.75,1.0")
    p.add_argument("--n", type=int, default=4)
    p.set_defaults(func=cmd_interpolate)

    p = with_config(sub.add_parser("eval", help="FID/KID/intra-cluster LPIPS, optionally over repeated seeds"))
    p.add_argument("--ckpt", help="evaluate this checkpoint")
    p.add_argument("--source", help="source checkpoint for repeated transfer runs")
    p.add_argument("--arms", help="comma-separated transfer modes to compare")
    p.add_argument("--repeat", type=int, help="number of seeds per arm")
    p.add_argument("--welch", action="store_true", help="Welch t-test between every pair of arms")
    p.add_argument("--kimg", type=float, help="override budget.kimg for the repeated runs")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("diagnose", help="per-layer offset geometry"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--samples", type=int, default=1000)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 and usage on bad input
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"relocgan {args.command}: error: {exc}", file=sys.stderr)
        problems = getattr(exc, "problems", ())
        for name, why in problems:
            print(f"  {name}: {why}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
