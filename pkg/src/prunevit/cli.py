"""Command-line surface: analyze, latency, plan, train, run.

Reports are JSON on stdout (optionally mirrored to ``--out``); a short
human-readable summary goes to stderr. Every command honors ``--seed`` and
is bit-reproducible. Exit codes: 0 success, 2 validation error,
3 infeasible budget, 4 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import costmodel, trainer
from .backbone import ModelParams, model_forward
from .config import ArchConfig, parse_config, preset
from .dataset import class_pattern, make_blobs, split
from .errors import (ConfigError, DivergenceError, InfeasibleBudgetError,
                     PruneVitError)
from .latency import (LatencyTable, PruningPlan, block_lat, builtin_table,
                      load_table, plan_latency, solve_budget)
from .trainer import TrainSettings, fit
from .weights import load_weights, save_weights

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_DIVERGENCE = 4


@dataclass
class RunReport:
    """Machine-readable result of one command invocation."""

    command: str
    config_digest: str | None
    seed: int
    wall_time_s: float
    outputs: dict

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))


def _emit(report: RunReport, out: str | None, summary: list[str]) -> None:
    text = report.to_json()
    print(text)
    if out:
        Path(out).write_text(text + "\n")
    for line in summary:
        print(line, file=sys.stderr)


def _load_config(spec: str) -> ArchConfig:
    if Path(spec).exists():
        return parse_config(spec)
    try:
        return preset(spec)
    except ConfigError:
        raise ConfigError(
            f"--config {spec!r} is neither a file nor a known preset")


def _load_table_arg(args) -> LatencyTable:
    if args.table:
        return load_table(args.table, device=args.device)
    if args.device:
        return builtin_table(args.device)
    raise ConfigError("provide --table FILE or --device NAME")


def _parse_rates(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad rate list {text!r}: {exc}") from exc


def _plan_for_config(config: ArchConfig, rates: list[float] | None) -> PruningPlan:
    phase_rates = rates if rates is not None else config.phase_rates
    if len(phase_rates) != len(config.selector_positions):
        raise ConfigError(
            f"{len(phase_rates)} rates for {len(config.selector_positions)} "
            f"selector positions")
    return PruningPlan.from_phase_rates(config.blocks,
                                        config.selector_positions, phase_rates)


# --------------------------------------------------------------------------
# portable graymap I/O

def read_pgm(path: str | Path) -> np.ndarray:
    """Read a P2/P5 graymap into floats in [0, 1]."""
    raw = Path(path).read_bytes()
    if raw[:2] not in (b"P2", b"P5"):
        raise ConfigError(f"{path}: not a P2/P5 portable graymap")
    binary = raw[:2] == b"P5"
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    width, height, maxval = (int(t) for t in tokens)
    if binary:
        pos += 1
        dtype = np.uint8 if maxval < 256 else ">u2"
        data = np.frombuffer(raw, dtype=dtype, count=width * height,
                             offset=pos).astype(np.float64)
    else:
        data = np.array(raw[pos:].split()[:width * height], dtype=np.float64)
    return (data / maxval).reshape(height, width)


def write_pgm(image01: np.ndarray, path: str | Path) -> None:
    """Write a 2-D array of [0, 1] values as an ascii P2 graymap."""
    arr = np.clip(np.asarray(image01, dtype=np.float64), 0.0, 1.0)
    gray = np.round(arr * 255).astype(int)
    lines = [f"P2\n{arr.shape[1]} {arr.shape[0]}\n255"]
    lines += [" ".join(str(v) for v in row) for row in gray]
    Path(path).write_text("\n".join(lines) + "\n")


def _mask_ascii(mask_row: np.ndarray, config: ArchConfig) -> str:
    """Patch-grid dump of one image's keep mask: '#', kept, '.' pruned."""
    patches = mask_row[1:] if config.use_cls_token else mask_row
    side = config.patches_per_side
    grid = patches.reshape(side, side)
    return "\n".join("".join("#" if v >= 0.5 else "." for v in row)
                     for row in grid)


# --------------------------------------------------------------------------
# commands

def cmd_analyze(args) -> int:
    t0 = time.perf_counter()
    config = _load_config(args.config)
    rates = _parse_rates(args.rates) if args.rates else None
    use_plan = args.with_plan or rates is not None
    plan = _plan_for_config(config, rates) if use_plan else None
    cost = costmodel.model_flops(config, plan)
    outputs: dict = {"flops": cost.to_dict()}
    if plan is not None:
        outputs["plan"] = {"positions": plan.positions,
                           "phase_rates": plan.phase_rates()}
    if args.strategy_compare:
        if args.rate is None:
            raise ConfigError("--strategy-compare needs --rate")
        outputs["strategy_comparison"] = costmodel.compare_strategies(
            config, args.rate)
    report = RunReport("analyze", config.digest(), args.seed,
                       time.perf_counter() - t0, outputs)
    summary = [f"total: {cost.total / 1e9:.4f} GMACs "
               f"(baseline {cost.baseline_total / 1e9:.4f}, "
               f"reduction {cost.reduction_pct:.2f}%)",
               f"selector overhead: {cost.selector_share_pct:.3f}% | "
               f"packaging: {cost.packaging_share_pct:.4f}%"]
    if args.strategy_compare:
        sc = outputs["strategy_comparison"]
        summary.append(
            f"reduction at rate {args.rate}: token "
            f"{sc['token_reduction_pct']:.1f}% | head "
            f"{sc['head_reduction_pct']:.1f}% | channel "
            f"{sc['channel_reduction_pct']:.1f}%")
    _emit(report, args.out, summary)
    return EXIT_OK


def cmd_latency(args) -> int:
    t0 = time.perf_counter()
    table = _load_table_arg(args)
    outputs: dict = {
        "device": table.device,
        "table": {"rates": table.rates, "latencies_ms": table.latencies_ms},
    }
    summary = [f"device {table.device}: {len(table.rates)} measured points"]
    if args.rate is not None:
        outputs["rate"] = args.rate
        outputs["block_latency_ms"] = block_lat(table, args.rate)
        summary.append(f"block at rate {args.rate}: "
                       f"{outputs['block_latency_ms']:.3f} ms")
    if args.rates:
        rates = _parse_rates(args.rates)
        outputs["block_rates"] = rates
        outputs["plan_latency_ms"] = plan_latency(table, rates)
        summary.append(f"{len(rates)}-block plan: "
                       f"{outputs['plan_latency_ms']:.3f} ms")
    report = RunReport("latency", None, args.seed,
                       time.perf_counter() - t0, outputs)
    _emit(report, args.out, summary)
    return EXIT_OK


def cmd_plan(args) -> int:
    t0 = time.perf_counter()
    table = _load_table_arg(args)
    config = _load_config(args.config) if args.config else None
    if args.positions:
        positions = [int(t) for t in args.positions.split(",")]
    elif config is not None:
        positions = list(config.selector_positions)
    else:
        positions = [0]
    blocks = config.blocks if config is not None else args.blocks
    plan = solve_budget(table, blocks, positions, args.budget_ms,
                        args.grid_step)
    outputs: dict = {
        "budget_ms": args.budget_ms,
        "positions": plan.positions,
        "phase_rates": plan.phase_rates(),
        "block_rates": plan.block_rates,
        "plan_latency_ms": plan_latency(table, plan),
    }
    if config is not None:
        outputs["flops"] = costmodel.model_flops(config, plan).to_dict()
    summary = [f"budget {args.budget_ms:.3f} ms -> phases "
               f"{plan.phase_rates()} at blocks {plan.positions} "
               f"({outputs['plan_latency_ms']:.3f} ms)"]
    if args.progressive:
        if config is None:
            raise ConfigError("--progressive needs --config")
        outputs["schedule_log"] = _run_progressive(config, table,
                                                   args, summary)
    report = RunReport("plan", config.digest() if config else None, args.seed,
                       time.perf_counter() - t0, outputs)
    _emit(report, args.out, summary)
    return EXIT_OK


def _run_progressive(config: ArchConfig, table, args,
                     summary: list[str]) -> list[str]:
    data = make_blobs(args.classes, args.samples, config.image_size,
                      args.noise, args.seed)
    train_data, val_data = split(data, args.val_fraction, args.seed + 1)
    params = ModelParams.init(config, seed=args.seed)
    settings = TrainSettings(epochs=args.epochs, batch_size=args.batch_size,
                             lr_selector=args.lr_selector,
                             lr_backbone=args.lr_backbone, seed=args.seed,
                             grad_probe=False)
    base_cfg = dataclasses.replace(config, selector_positions=[],
                                   phase_rates=[])
    fit(params, base_cfg, PruningPlan(config.blocks), train_data, None,
        settings)
    state = trainer.progressive_schedule(
        params, base_cfg, train_data, val_data, table, args.budget_ms,
        settings, finetune_epochs=args.finetune_epochs)
    summary.append(f"progressive plan: blocks {state.plan.positions} rates "
                   f"{state.plan.phase_rates()} "
                   f"({state.plan_latency_ms:.3f} ms, feasible="
                   f"{state.feasible})")
    return state.log_lines()


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    config = _load_config(args.config)
    plan = _plan_for_config(config, None)
    data = make_blobs(args.classes, args.samples, config.image_size,
                      args.noise, args.seed)
    if config.num_classes != args.classes:
        raise ConfigError(
            f"config expects {config.num_classes} classes, dataset flag says "
            f"{args.classes}")
    train_data, val_data = split(data, args.val_fraction, args.seed + 1)
    params = ModelParams.init(config, seed=args.seed)
    settings = TrainSettings(
        epochs=args.epochs, batch_size=args.batch_size,
        lr_selector=args.lr_selector, lr_backbone=args.lr_backbone,
        optimizer=args.optimizer, seed=args.seed,
        grad_probe=not args.no_grad_probe)
    report_fit = fit(params, config, plan, train_data, val_data, settings)
    if args.weights_out:
        save_weights(params, config, args.weights_out)
    outputs = {
        "dataset": {"classes": args.classes, "samples": args.samples,
                    "image_size": config.image_size, "noise": args.noise,
                    "val_fraction": args.val_fraction},
        "epochs": args.epochs,
        "final_accuracy": report_fit.final_accuracy,
        "kept_fraction_per_phase": report_fit.kept_fraction_per_phase,
        "grad_probe_rel_err": report_fit.grad_probe_rel_err,
        "loss_history_tail": report_fit.history[-5:],
        "weights_file": args.weights_out,
    }
    report = RunReport("train", config.digest(), args.seed,
                       time.perf_counter() - t0, outputs)
    _emit(report, args.out, [
        f"accuracy {report_fit.final_accuracy:.4f} after {args.epochs} epochs",
        f"kept fraction per phase: {report_fit.kept_fraction_per_phase}",
    ])
    return EXIT_OK


def cmd_run(args) -> int:
    t0 = time.perf_counter()
    config = _load_config(args.config)
    params = ModelParams.init(config, seed=args.seed)
    if args.weights:
        load_weights(args.weights, params, config)
    if args.input:
        image = read_pgm(args.input)
        if image.shape != (config.image_size, config.image_size):
            raise ConfigError(
                f"input is {image.shape}, config wants "
                f"{(config.image_size, config.image_size)}")
        images = image[None, :, :, None]
        labels = None
    else:
        rng = np.random.default_rng(args.seed)
        labels = (np.full(args.synthetic, args.class_id)
                  if args.class_id is not None
                  else rng.integers(0, config.num_classes, args.synthetic))
        patterns = np.stack([
            class_pattern(int(k), config.num_classes, config.image_size)
            for k in labels])
        images = (patterns + rng.normal(0.0, args.noise, patterns.shape)
                  )[..., None]
    res = model_forward(images, params, config, mode=args.mode,
                        seed=args.seed, force_keep_all=args.force_keep)
    masks_ascii = [
        [_mask_ascii(res.phase_masks[p][b], config)
         for b in range(images.shape[0])]
        for p in range(len(res.phase_masks))
    ]
    per_image_kept = [
        [float(res.phase_masks[p][b][1 if config.use_cls_token else 0:].mean())
         for p in range(len(res.phase_masks))]
        for b in range(images.shape[0])
    ]
    outputs = {
        "mode": args.mode,
        "logits": res.logits.data.tolist(),
        "predictions": res.logits.data.argmax(axis=-1).tolist(),
        "labels": None if labels is None else np.asarray(labels).tolist(),
        "kept_fraction_per_phase": res.kept_fraction_per_phase,
        "kept_fraction_per_image": per_image_kept,
        "keep_masks_ascii": masks_ascii,
    }
    if args.mask_out:
        side = config.patches_per_side
        for p in range(len(res.phase_masks)):
            for b in range(images.shape[0]):
                patches = res.phase_masks[p][b][1 if config.use_cls_token else 0:]
                write_pgm(patches.reshape(side, side),
                          f"{args.mask_out}_img{b}_phase{p}.pgm")
    report = RunReport("run", config.digest(), args.seed,
                       time.perf_counter() - t0, outputs)
    summary = [f"kept per phase: {res.kept_fraction_per_phase}"]
    for p, per_image in enumerate(masks_ascii):
        summary.append(f"phase {p} keep mask (image 0):")
        summary.append(per_image[0])
    _emit(report, args.out, summary)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunevit",
        description="Latency-aware soft token pruning on a toy ViT")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=str, default=None,
                       help="also write the JSON report to this file")

    p = sub.add_parser("analyze", help="FLOPs breakdown and strategy compare")
    p.add_argument("--config", required=True,
                   help="config JSON path or preset (deit-t, deit-s, toy)")
    p.add_argument("--with-plan", action="store_true",
                   help="apply the config's selector positions and rates")
    p.add_argument("--rates", type=str, default=None,
                   help="override per-phase rates, e.g. 0.3,0.5,0.7")
    p.add_argument("--strategy-compare", action="store_true")
    p.add_argument("--rate", type=float, default=None,
                   help="pruning rate for --strategy-compare")
    common(p)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("latency", help="table lookup and plan latency")
    p.add_argument("--table", type=str, default=None)
    p.add_argument("--device", type=str, default=None,
                   help="builtin table name (deit-t, deit-s)")
    p.add_argument("--rate", type=float, default=None)
    p.add_argument("--rates", type=str, default=None,
                   help="per-block rates for a plan latency sum")
    common(p)
    p.set_defaults(fn=cmd_latency)

    p = sub.add_parser("plan", help="solve rates for a latency budget")
    p.add_argument("--table", type=str, default=None)
    p.add_argument("--device", type=str, default=None)
    p.add_argument("--budget-ms", type=float, required=True)
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--blocks", type=int, default=12)
    p.add_argument("--positions", type=str, default=None,
                   help="selector positions, e.g. 3,6,9 (0 = before block 1)")
    p.add_argument("--grid-step", type=float, default=0.05)
    p.add_argument("--progressive", action="store_true",
                   help="run the layer-to-phase schedule on synthetic data")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--samples", type=int, default=300)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--val-fraction", type=float, default=1 / 3)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--finetune-epochs", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr-selector", type=float, default=5e-4)
    p.add_argument("--lr-backbone", type=float, default=5e-6)
    common(p)
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("train", help="train on synthetic blob data")
    p.add_argument("--config", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr-selector", type=float, default=5e-4)
    p.add_argument("--lr-backbone", type=float, default=5e-6)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--samples", type=int, default=600)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--val-fraction", type=float, default=1 / 3)
    p.add_argument("--no-grad-probe", action="store_true")
    p.add_argument("--weights-out", type=str, default=None)
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("run", help="forward pass with keep-mask dumps")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", type=str, default=None)
    p.add_argument("--mode", choices=["train", "eval", "infer"],
                   default="infer")
    p.add_argument("--input", type=str, default=None,
                   help="portable graymap (P2/P5) image")
    p.add_argument("--synthetic", type=int, default=1,
                   help="number of synthetic samples when no --input")
    p.add_argument("--class-id", type=int, default=None)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--force-keep", action="store_true",
                   help="clamp every selector decision to keep")
    p.add_argument("--mask-out", type=str, default=None,
                   help="prefix for per-phase P2 keep-mask dumps")
    common(p)
    p.set_defaults(fn=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except InfeasibleBudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except PruneVitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
