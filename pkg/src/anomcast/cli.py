"""Command-line interface.

Commands: generate, train, eval, ablate, sparsity, gradcheck,
export-attention. Every command is deterministic under (config, seed,
inputs), writes a JSON run manifest sufficient to reproduce it, and never
mutates its input files. Exit codes: 0 success, 1 data error, 2 config
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, format_config, parse_config
from .errors import ConfigError, ContractError, DataError, DomainError, NumericError, ShapeError
from .events import export_events, ingest_csv, rebin, write_events_csv
from .features import AnomalyTensor, apply_norm
from .graph import RegionGraph, build_grid_graph, load_graph_spec, save_graph_spec
from .heads import LossConfig
from .layers import ABLATIONS, AttentionTrace
from .metrics import compute_metrics, format_metrics, metrics_csv_row
from .model import forward, gradient_check_model, init_model
from .simulate import generate
from .training import evaluate, make_windows, predict_batch, train

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_MAX_REGIONS = 6
GRADCHECK_MAX_WINDOW = 6


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (ShapeError, DomainError, ContractError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anomcast",
        description="Zero-inflated spatiotemporal anomaly forecasting toolkit",
    )
    parser.add_argument("--version", action="version", version=f"anomcast {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic event CSV and graph spec")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a forecaster and write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--baseline", choices=("zero",), default=None)
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--out", default=None, help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare all ablation variants")
    p.add_argument("--config", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True, help="comparison CSV path")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sparsity", help="rebin-and-retrain sweep over time intervals")
    p.add_argument("--config", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--factors", default="1,2", help="comma-separated rebin factors")
    p.add_argument("--out", required=True, help="per-factor metrics CSV path")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_sparsity)

    p = sub.add_parser("gradcheck", help="finite-difference check of model gradients")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="optional report path")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-attention", help="export attention weights to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_attention)
    return parser


# -- shared plumbing ---------------------------------------------------------


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path, command: str, cfg: RunConfig | None, inputs: list, outputs: list, extra=None):
    manifest = {
        "tool": "anomcast",
        "version": __version__,
        "command": command,
        "seed": cfg.seed if cfg is not None else None,
        "config": format_config(cfg).strip().splitlines() if cfg is not None else None,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "artifacts": [str(p) for p in outputs],
    }
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_task(cfg: RunConfig, events_path, graph_path) -> tuple[AnomalyTensor, RegionGraph]:
    graph = load_graph_spec(graph_path)
    tensor, _report = ingest_csv(
        events_path,
        graph,
        categories=cfg.category_names(),
        t0=cfg.t0(),
        slot_duration=cfg.slot_duration(),
        n_slots=cfg.n_slots,
    )
    return tensor, graph


def _write_epoch_log(path, log) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "val_mae", "val_rmse"])
        for rec in log:
            writer.writerow(
                [rec.epoch, repr(rec.lr), repr(rec.train_loss), repr(rec.val_mae), repr(rec.val_rmse)]
            )


def _train_once(cfg: RunConfig, tensor: AnomalyTensor, graph: RegionGraph):
    tc = cfg.train_config()
    dataset = make_windows(tensor, tc)
    result = train(dataset, tc, graph)
    return tc, dataset, result


# -- commands ----------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    graph = build_grid_graph(cfg.grid_rows, cfg.grid_cols, diagonal=cfg.grid_diagonal)
    tensor = generate(cfg.synth_config(), graph)
    tensor = replace_t0(tensor, cfg)

    events_path = out_dir / "events.csv"
    graph_path = out_dir / "graph.txt"
    records = export_events(tensor, per_unit=True)
    write_events_csv(events_path, records)
    save_graph_spec(graph, graph_path)
    _write_manifest(
        out_dir / "manifest.json",
        "generate",
        cfg,
        inputs=[args.config],
        outputs=[events_path, graph_path],
        extra={"zero_ratio": tensor.zero_ratio, "n_instances": len(records)},
    )
    print(f"wrote {events_path} and {graph_path}")
    print(f"zero_ratio={tensor.zero_ratio:.4f}")
    print(f"n_instances={len(records)}")
    return 0


def replace_t0(tensor: AnomalyTensor, cfg: RunConfig) -> AnomalyTensor:
    return AnomalyTensor(
        values=tensor.values,
        slot_duration=tensor.slot_duration,
        category_names=cfg.category_names(),
        t0=cfg.t0(),
    )


def cmd_train(args) -> int:
    cfg = _load_config(args)
    tensor, graph = _load_task(cfg, args.events, args.graph)
    tc, dataset, result = _train_once(cfg, tensor, graph)

    ckpt = Checkpoint(
        model=result.model,
        run_cfg=cfg,
        stats=result.stats,
        n_regions=graph.n_regions,
        categories=cfg.category_names(),
        best_epoch=result.best_epoch,
        best_val_mae=result.best_val_mae,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, ckpt)
    log_path = out.with_name(out.name + ".log.csv")
    _write_epoch_log(log_path, result.log)
    _write_manifest(
        out.with_name(out.name + ".manifest.json"),
        "train",
        cfg,
        inputs=[args.config, args.events, args.graph],
        outputs=[out, log_path],
        extra={"best_epoch": result.best_epoch, "best_val_mae": result.best_val_mae},
    )
    print(f"trained {tc.epochs} epochs; best val MAE {result.best_val_mae:.4f} at epoch {result.best_epoch}")
    print(f"checkpoint: {out}")
    return 0


def _eval_checkpoint(ckpt: Checkpoint, events_path, graph_path, split: str, baseline):
    graph = load_graph_spec(graph_path)
    if graph.n_regions != ckpt.n_regions:
        raise ConfigError(
            f"n_regions mismatch: checkpoint has {ckpt.n_regions}, graph has {graph.n_regions}"
        )
    cfg = ckpt.run_cfg
    tensor, _ = ingest_csv(
        events_path,
        graph,
        categories=ckpt.categories,
        t0=cfg.t0(),
        slot_duration=cfg.slot_duration(),
        n_slots=cfg.n_slots,
    )
    tc = cfg.train_config()
    dataset = make_windows(tensor, tc)
    # evaluation must reuse the training-time statistics, never refit
    dataset.stats = ckpt.stats
    dataset.x_norm = apply_norm(tensor.values, ckpt.stats)
    targets = dataset.targets_for(split)
    if len(targets) == 0:
        raise DataError(f"split {split!r} has no windows for this dataset")
    _, raw = dataset.labels(targets)
    if baseline == "zero":
        preds = np.zeros_like(raw)
    else:
        preds = predict_batch(ckpt.model, dataset, targets, graph, tc)
    return compute_metrics(raw, preds)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    report = _eval_checkpoint(ckpt, args.events, args.graph, args.split, args.baseline)
    if args.format == "csv":
        text = "mae,rmse,mae_star,rmse_star,zero_ratio,n_samples,n_nonzero\n" + metrics_csv_row(report)
    else:
        text = format_metrics(report)
    print(text)
    outputs = []
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        outputs.append(args.out)
        _write_manifest(
            str(args.out) + ".manifest.json",
            "eval",
            ckpt.run_cfg,
            inputs=[args.checkpoint, args.events, args.graph],
            outputs=outputs,
            extra={"split": args.split, "baseline": args.baseline},
        )
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    tensor, graph = _load_task(cfg, args.events, args.graph)
    rows = []
    for variant in ABLATIONS:
        vcfg = replace(cfg, ablation=variant)
        tc, dataset, result = _train_once(vcfg, tensor, graph)
        report = evaluate(result.model, dataset, graph, tc, split="test")
        rows.append((variant, report))
        print(f"{variant}: {metrics_csv_row(report)}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "mae", "rmse", "mae_star", "rmse_star"])
        for variant, report in rows:
            writer.writerow(
                [
                    variant,
                    f"{report.mae:.4f}",
                    f"{report.rmse:.4f}",
                    "" if report.mae_star is None else f"{report.mae_star:.4f}",
                    "" if report.rmse_star is None else f"{report.rmse_star:.4f}",
                ]
            )
    _write_manifest(
        str(out) + ".manifest.json",
        "ablate",
        cfg,
        inputs=[args.config, args.events, args.graph],
        outputs=[out],
    )
    return 0


def cmd_sparsity(args) -> int:
    cfg = _load_config(args)
    factors = []
    for chunk in str(args.factors).split(","):
        chunk = chunk.strip()
        if chunk:
            try:
                factors.append(int(chunk))
            except ValueError:
                raise ConfigError(f"bad rebin factor {chunk!r}") from None
    if not factors or min(factors) < 1:
        raise ConfigError(f"rebin factors must be integers >= 1; got {args.factors!r}")
    tensor, graph = _load_task(cfg, args.events, args.graph)
    rows = []
    for factor in factors:
        coarse = rebin(tensor, factor)
        tc, dataset, result = _train_once(cfg, coarse, graph)
        report = evaluate(result.model, dataset, graph, tc, split="test")
        rows.append((factor, coarse.zero_ratio, report))
        print(f"factor={factor} zero_ratio={coarse.zero_ratio:.4f} {metrics_csv_row(report)}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["factor", "zero_ratio", "mae", "rmse", "mae_star", "rmse_star"])
        for factor, ratio, report in rows:
            writer.writerow(
                [
                    factor,
                    f"{ratio:.4f}",
                    f"{report.mae:.4f}",
                    f"{report.rmse:.4f}",
                    "" if report.mae_star is None else f"{report.mae_star:.4f}",
                    "" if report.rmse_star is None else f"{report.rmse_star:.4f}",
                ]
            )
    _write_manifest(
        str(out) + ".manifest.json",
        "sparsity",
        cfg,
        inputs=[args.config, args.events, args.graph],
        outputs=[out],
        extra={"factors": factors},
    )
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    n_regions = cfg.grid_rows * cfg.grid_cols
    if n_regions > GRADCHECK_MAX_REGIONS:
        raise ConfigError(
            f"gradcheck requires a toy graph (N <= {GRADCHECK_MAX_REGIONS}); "
            f"config has {cfg.grid_rows}x{cfg.grid_cols} = {n_regions}"
        )
    if cfg.t_window > GRADCHECK_MAX_WINDOW:
        raise ConfigError(
            f"gradcheck requires a toy window (t_window <= {GRADCHECK_MAX_WINDOW}); got {cfg.t_window}"
        )
    graph = build_grid_graph(cfg.grid_rows, cfg.grid_cols, diagonal=cfg.grid_diagonal)
    rng = np.random.default_rng(cfg.seed)
    model = init_model(
        d=cfg.hidden_size,
        n_heads=cfg.n_heads,
        n_layers=cfg.n_layers,
        n_categories=cfg.n_categories,
        rng=rng,
        ablation=cfg.ablation,
        dsa_self_loop=cfg.dsa_self_loop,
        dsa_activation=cfg.dsa_activation,
    )
    xbar = rng.uniform(-1.0, 1.0, size=(n_regions, cfg.t_window, cfg.n_categories))
    y_raw = rng.poisson(0.8, size=(n_regions, cfg.n_categories)).astype(np.float64)
    y_norm = (y_raw - y_raw.mean()) / max(y_raw.std(), 1.0)
    loss_cfg = LossConfig(eta=cfg.eta, lambda_c=cfg.lambda_c, lambda_reg=cfg.lambda_reg, tau=cfg.tau)

    errors = gradient_check_model(model, graph, xbar, y_norm, y_raw, loss_cfg)
    lines = []
    worst = 0.0
    for name in sorted(errors):
        err = errors[name]
        worst = max(worst, err)
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        lines.append(f"{name} {err:.3e} {status}")
    text = "\n".join(lines)
    print(text)
    print(f"worst={worst:.3e} tolerance={GRADCHECK_TOLERANCE:.0e}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + f"\nworst={worst:.3e}\n")
        _write_manifest(
            str(args.out) + ".manifest.json",
            "gradcheck",
            cfg,
            inputs=[args.config],
            outputs=[args.out],
            extra={"worst": worst},
        )
    if worst >= GRADCHECK_TOLERANCE:
        print("gradient check FAILED", file=sys.stderr)
        return 3
    return 0


def cmd_export_attention(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    graph = load_graph_spec(args.graph)
    if graph.n_regions != ckpt.n_regions:
        raise ConfigError(
            f"n_regions mismatch: checkpoint has {ckpt.n_regions}, graph has {graph.n_regions}"
        )
    cfg = ckpt.run_cfg
    tensor, _ = ingest_csv(
        args.events,
        graph,
        categories=ckpt.categories,
        t0=cfg.t0(),
        slot_duration=cfg.slot_duration(),
        n_slots=cfg.n_slots,
    )
    tc = cfg.train_config()
    dataset = make_windows(tensor, tc)
    dataset.stats = ckpt.stats
    dataset.x_norm = apply_norm(tensor.values, ckpt.stats)
    targets = dataset.test_targets if len(dataset.test_targets) else np.arange(tc.t_window, tensor.n_slots)
    last = int(targets[-1])
    window = dataset.x_norm[:, last - tc.t_window : last, :]
    result = forward(ckpt.model, window, graph, tau=tc.loss.tau)
    trace = AttentionTrace.from_layer_traces(result.traces, batched=False)
    trace.to_csv(args.out)
    _write_manifest(
        str(args.out) + ".manifest.json",
        "export-attention",
        cfg,
        inputs=[args.checkpoint, args.events, args.graph],
        outputs=[args.out],
        extra={"window_target_slot": last},
    )
    print(f"wrote attention trace for target slot {last} to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
