"""Command-line entry point wiring the library into reproducible runs.

Subcommands: gen, extract, train-head, eval, compress, sweep, report.
Every run resolves its configuration (JSON file overlaid with CLI flags and
defaults), writes the fully-resolved config next to its outputs as
``run_config.json``, and emits only deterministic data files -- re-running a
command with the same config and seed reproduces every output byte for byte,
except for explicitly-labeled timing columns.

Exit codes: 0 success, 2 config/input error, 3 precondition-gate failure,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import compression as cp
from . import datagen, monitor, recurrent
from .errors import AccuracyGateError, ActspecError, NumericalError
from .features import FeatureConfig

__all__ = ["main", "entry"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_GATE = 3
EXIT_NUMERICAL = 4

GEN_DEFAULTS = {
    "kind": "traces",
    "traces": {
        "n_per_class": 100,
        "dim": 40,
        "length": 120,
        "sigma_sq": 1.0,
        "strengths": list(datagen.DEFAULT_STRENGTHS),
        "decay_rate": datagen.DEFAULT_DECAY_RATE,
        "corpus": "hallucination",
        "ood_sigma_sq": datagen.DEFAULT_OOD_SIGMA_SQ,
    },
    "mixture": {
        "classes": 8,
        "dim": 16,
        "samples_per_class": 500,
        "center_scale": 2.0,
        "noise_std": 0.3,
        "embed_dim": 64,
    },
}

FEATURE_DEFAULTS = {
    "window_len": 30,
    "leading_k": 5,
    "histogram_bins": 32,
    "centered": False,
    "eigengap_floor": 1e-12,
    "outlier_margin": 0.0,
}

TRAIN_DEFAULTS = {
    "cell": "gru",
    "hidden_dim": 16,
    "learning_rate": 3e-3,
    "epochs": 30,
    "batch_size": 16,
    "loss_mode": "last_step",
    "optimizer": "adam",
    "grad_clip": 5.0,
}

MLP_DEFAULTS = {
    "dims": [64, 128, 64, 8],
    "learning_rate": 3e-3,
    "epochs": 40,
    "batch_size": 64,
    "optimizer": "adam",
    "grad_clip": 5.0,
    "target_accuracy": 0.97,
}

PIPELINE_DEFAULTS = {
    "quantile": 0.5,
    "k_min": 4,
    "target_reduction": 0.4,
    "calibration_size": 512,
    "accuracy_gate": 0.9,
    "passes": 1,
    "distill_alpha": 0.5,
    "distill_temperature": 2.0,
    "distill_epochs": 10,
}


def _merge(defaults: dict, override: dict | None) -> dict:
    out = json.loads(json.dumps(defaults))  # deep copy of plain data
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ActspecError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ActspecError(f"{p}: invalid JSON config: {exc}") from exc


def _write_run_config(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(
        json.dumps(resolved, sort_keys=True, indent=2) + "\n"
    )


def _feature_config(cfg: dict) -> FeatureConfig:
    return FeatureConfig(
        leading_k=int(cfg["leading_k"]),
        histogram_bins=int(cfg["histogram_bins"]),
        centered=bool(cfg["centered"]),
        eigengap_floor=float(cfg["eigengap_floor"]),
        outlier_margin=float(cfg["outlier_margin"]),
    )


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(
            ",".join(repr(v) if isinstance(v, float) else str(v) for v in row)
        )
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    cfg = _merge(GEN_DEFAULTS, _load_config(args.config).get("gen"))
    if args.kind:
        cfg["kind"] = args.kind
    out_dir = Path(args.out)
    resolved = {"command": "gen", "seed": args.seed, "gen": cfg}
    _write_run_config(out_dir, resolved)
    if cfg["kind"] == "traces":
        tc = cfg["traces"]
        template = datagen.default_trace_config(
            seed=args.seed,
            dim=int(tc["dim"]),
            length=int(tc["length"]),
            sigma_sq=float(tc["sigma_sq"]),
            strengths=tuple(float(s) for s in tc["strengths"]),
            decay_rate=float(tc["decay_rate"]),
        )
        traces = datagen.gen_trace_corpus(
            int(tc["n_per_class"]),
            template,
            seed=args.seed,
            kind=tc["corpus"],
            ood_sigma_sq=float(tc["ood_sigma_sq"]),
        )
        path = out_dir / "traces.jsonl"
        monitor.write_traces_jsonl(traces, path)
        counts: dict[str, int] = {}
        for t in traces:
            counts[t.label] = counts.get(t.label, 0) + 1
        print(f"wrote {len(traces)} traces to {path}")
        for label in sorted(counts):
            print(f"  {label}: {counts[label]}")
    elif cfg["kind"] == "mixture":
        mc = cfg["mixture"]
        dataset = datagen.gen_mixture_dataset(
            datagen.MixtureDatasetConfig(
                classes=int(mc["classes"]),
                dim=int(mc["dim"]),
                samples_per_class=int(mc["samples_per_class"]),
                center_scale=float(mc["center_scale"]),
                noise_std=float(mc["noise_std"]),
                embed_dim=int(mc["embed_dim"]),
                seed=args.seed,
            )
        )
        path = out_dir / "mixture.csv"
        datagen.write_mixture_csv(dataset, path)
        print(
            f"wrote {dataset.inputs.shape[0]} samples "
            f"({mc['classes']} classes) to {path}"
        )
    else:
        raise ActspecError(f"unknown gen kind {cfg['kind']!r}")
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = _merge(FEATURE_DEFAULTS, _load_config(args.config).get("features"))
    if args.window_len:
        cfg["window_len"] = args.window_len
    out_dir = Path(args.out)
    _write_run_config(
        out_dir,
        {"command": "extract", "seed": args.seed, "traces": args.traces, "features": cfg},
    )
    traces = monitor.read_traces_jsonl(args.traces)
    feature_config = _feature_config(cfg)
    series = [
        monitor.run_trace(t, window_len=int(cfg["window_len"]), config=feature_config)
        for t in traces
    ]
    path = out_dir / "descriptors.csv"
    monitor.write_descriptor_csv(series, path)
    n_rows = sum(len(s.steps) for s in series)
    print(f"wrote {n_rows} descriptor rows for {len(series)} traces to {path}")
    return EXIT_OK


def _extract_corpus(args, cfg_features: dict):
    traces = monitor.read_traces_jsonl(args.traces)
    feature_config = _feature_config(cfg_features)
    corpus = [
        monitor.run_trace(
            t, window_len=int(cfg_features["window_len"]), config=feature_config
        )
        for t in traces
    ]
    return traces, corpus


def _save_head_checkpoint(
    path: Path, params, train_cfg: dict, metrics: dict
) -> None:
    payload = {
        "format": "actspec-head-v1",
        "cell": params.cell,
        "input_dim": params.input_dim,
        "hidden_dim": params.hidden_dim,
        "gate_order": list(recurrent.GATE_ORDERS[params.cell]),
        "weights": {
            "w_in": [float(v) for v in params.w_in.ravel()],
            "w_rec": [float(v) for v in params.w_rec.ravel()],
            "b": [float(v) for v in params.b],
            "w_out": [float(v) for v in params.w_out],
            "b_out": [float(v) for v in params.b_out],
        },
        "standardization": None
        if params.standardization is None
        else {
            "mean": [float(v) for v in params.standardization[0]],
            "std": [float(v) for v in params.standardization[1]],
        },
        "train_config": train_cfg,
        "metrics": metrics,
    }
    path.write_text(json.dumps(payload, sort_keys=True))


def load_head_checkpoint(path: str | Path) -> recurrent.RecurrentHeadParams:
    p = Path(path)
    try:
        payload = json.loads(p.read_text())
        h = int(payload["hidden_dim"])
        d = int(payload["input_dim"])
        g = len(recurrent.GATE_ORDERS[payload["cell"]])
        w = payload["weights"]
        std = payload.get("standardization")
        params = recurrent.RecurrentHeadParams(
            cell=payload["cell"],
            input_dim=d,
            hidden_dim=h,
            w_in=np.asarray(w["w_in"], dtype=float).reshape(g * h, d),
            w_rec=np.asarray(w["w_rec"], dtype=float).reshape(g * h, h),
            b=np.asarray(w["b"], dtype=float),
            w_out=np.asarray(w["w_out"], dtype=float),
            b_out=np.asarray(w["b_out"], dtype=float),
            standardization=None
            if std is None
            else (
                np.asarray(std["mean"], dtype=float),
                np.asarray(std["std"], dtype=float),
            ),
        )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ActspecError(f"{p}: not a valid head checkpoint: {exc}") from exc
    return params


def cmd_train_head(args) -> int:
    file_cfg = _load_config(args.config)
    fcfg = _merge(FEATURE_DEFAULTS, file_cfg.get("features"))
    tcfg = _merge(TRAIN_DEFAULTS, file_cfg.get("train"))
    if args.window_len:
        fcfg["window_len"] = args.window_len
    if args.cell:
        tcfg["cell"] = args.cell
    out_dir = Path(args.out)
    _write_run_config(
        out_dir,
        {
            "command": "train-head",
            "seed": args.seed,
            "traces": args.traces,
            "features": fcfg,
            "train": tcfg,
        },
    )
    _, corpus = _extract_corpus(args, fcfg)
    cells = (
        list(recurrent.CELL_KINDS) if tcfg["cell"] == "all" else [tcfg["cell"]]
    )
    train_config = recurrent.TrainConfig(
        learning_rate=float(tcfg["learning_rate"]),
        epochs=int(tcfg["epochs"]),
        batch_size=int(tcfg["batch_size"]),
        seed=args.seed,
        loss_mode=tcfg["loss_mode"],
        optimizer=tcfg["optimizer"],
        grad_clip=float(tcfg["grad_clip"]),
    )
    test = [s for s in corpus if s.meta.get("split") == "test"]
    comparison = []
    for cell in cells:
        params, history = recurrent.head_train(
            corpus, train_config, cell=cell, hidden_dim=int(tcfg["hidden_dim"])
        )
        best_val = max(h["val_auroc"] for h in history)
        test_auroc = None
        if test:
            labels = np.array([s.risk_label for s in test])
            scores = np.array([recurrent.score_series(params, s) for s in test])
            test_auroc = recurrent.auroc(scores, labels)
        metrics = {"best_val_auroc": best_val, "test_auroc": test_auroc}
        _save_head_checkpoint(
            out_dir / f"checkpoint_{cell}.json", params, tcfg, metrics
        )
        _write_csv(
            out_dir / f"history_{cell}.csv",
            ["epoch", "train_loss", "val_loss", "val_auroc"],
            [
                [h["epoch"], h["train_loss"], h["val_loss"], h["val_auroc"]]
                for h in history
            ],
        )
        comparison.append(
            [
                cell,
                best_val,
                test_auroc if test_auroc is not None else float("nan"),
                recurrent.head_param_count(
                    cell, params.input_dim, params.hidden_dim
                ),
            ]
        )
        print(
            f"{cell}: best val AUROC {best_val:.4f}"
            + (f", test AUROC {test_auroc:.4f}" if test_auroc is not None else "")
        )
    _write_csv(
        out_dir / "cells.csv",
        ["cell", "val_auroc", "test_auroc", "param_count"],
        comparison,
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    file_cfg = _load_config(args.config)
    fcfg = _merge(FEATURE_DEFAULTS, file_cfg.get("features"))
    if args.window_len:
        fcfg["window_len"] = args.window_len
    out_dir = Path(args.out)
    budgets = (
        [int(b) for b in args.budgets.split(",")] if args.budgets else None
    )
    ablation = (
        [int(w) for w in args.ablation_windows.split(",")]
        if args.ablation_windows
        else None
    )
    _write_run_config(
        out_dir,
        {
            "command": "eval",
            "seed": args.seed,
            "traces": args.traces,
            "checkpoint": args.checkpoint,
            "features": fcfg,
            "budgets": budgets,
            "ablation_windows": ablation,
            "train": _merge(TRAIN_DEFAULTS, file_cfg.get("train")),
        },
    )
    traces, corpus = _extract_corpus(args, fcfg)
    params = load_head_checkpoint(args.checkpoint)
    evaluable = [s for s in corpus if s.meta.get("split") == "test"] or corpus
    labels = np.array([s.risk_label for s in evaluable])
    scores = np.array([recurrent.score_series(params, s) for s in evaluable])
    overall = recurrent.auroc(scores, labels)
    _write_csv(
        out_dir / "metrics.csv",
        ["cell", "n_traces", "auroc"],
        [[params.cell, len(evaluable), overall]],
    )
    print(f"AUROC over {len(evaluable)} traces: {overall:.4f}")
    if budgets:
        curve = recurrent.eval_early_detection(params, evaluable, budgets)
        _write_csv(
            out_dir / "early_detection.csv",
            ["budget_tokens", "auroc"],
            [[b, a] for b, a in curve],
        )
        print(f"early-detection curve written for budgets {budgets}")
    if ablation:
        tcfg = _merge(TRAIN_DEFAULTS, file_cfg.get("train"))
        train_config = recurrent.TrainConfig(
            learning_rate=float(tcfg["learning_rate"]),
            epochs=int(tcfg["epochs"]),
            batch_size=int(tcfg["batch_size"]),
            seed=args.seed,
            loss_mode=tcfg["loss_mode"],
            optimizer=tcfg["optimizer"],
            grad_clip=float(tcfg["grad_clip"]),
        )
        rows = recurrent.eval_window_ablation(
            params.cell,
            ablation,
            traces,
            train_config,
            _feature_config(fcfg),
        )
        _write_csv(
            out_dir / "ablation.csv",
            ["window_len", "auroc", "per_token_latency_s"],
            [[r["window_len"], r["auroc"], r["per_token_latency_s"]] for r in rows],
        )
        print(f"window ablation written for lengths {ablation}")
    return EXIT_OK


def _pipeline_config(pcfg: dict, seed: int) -> cp.PipelineConfig:
    return cp.PipelineConfig(
        quantile=float(pcfg["quantile"]),
        k_min=int(pcfg["k_min"]),
        target_reduction=float(pcfg["target_reduction"]),
        calibration_size=int(pcfg["calibration_size"]),
        accuracy_gate=float(pcfg["accuracy_gate"]),
        passes=int(pcfg["passes"]),
        seed=seed,
        distill=cp.DistillConfig(
            alpha=float(pcfg["distill_alpha"]),
            temperature=float(pcfg["distill_temperature"]),
            epochs=int(pcfg["distill_epochs"]),
            seed=seed,
        ),
    )


def _prepare_compress(args):
    file_cfg = _load_config(args.config)
    mcfg = _merge(MLP_DEFAULTS, file_cfg.get("mlp"))
    pcfg = _merge(PIPELINE_DEFAULTS, file_cfg.get("pipeline"))
    dataset = datagen.read_mixture_csv(args.data)
    if args.pretrained:
        pre = Path(args.pretrained)
        if not pre.is_file():
            raise ActspecError(f"pretrained checkpoint not found: {pre}")
        model = cp.load_mlp_json(pre)
        history = []
    else:
        n_classes = int(dataset.labels.max()) + 1
        dims = [int(d) for d in mcfg["dims"]]
        if dims[0] != dataset.inputs.shape[1] or dims[-1] != n_classes:
            dims = [dataset.inputs.shape[1], *dims[1:-1], n_classes]
        model = cp.init_mlp(dims, seed=args.seed)
        model, history = cp.mlp_train(
            model,
            dataset,
            cp.MLPTrainConfig(
                learning_rate=float(mcfg["learning_rate"]),
                epochs=int(mcfg["epochs"]),
                batch_size=int(mcfg["batch_size"]),
                seed=args.seed,
                optimizer=mcfg["optimizer"],
                grad_clip=float(mcfg["grad_clip"]),
                target_accuracy=mcfg["target_accuracy"],
            ),
        )
    return dataset, model, history, mcfg, pcfg


def cmd_compress(args) -> int:
    out_dir = Path(args.out)
    dataset, model, history, mcfg, pcfg = _prepare_compress(args)
    _write_run_config(
        out_dir,
        {
            "command": "compress",
            "seed": args.seed,
            "data": args.data,
            "pretrained": args.pretrained,
            "mlp": mcfg,
            "pipeline": pcfg,
        },
    )
    config = _pipeline_config(pcfg, args.seed)
    compressed, reports, summary = cp.compress_pipeline(model, dataset, config)
    cp.save_mlp_json(model, out_dir / "model_base.json")
    cp.save_mlp_json(compressed, out_dir / "model_compressed.json")
    if history:
        _write_csv(
            out_dir / "train_history.csv",
            ["epoch", "train_loss", "val_accuracy"],
            [[h["epoch"], h["train_loss"], h["val_accuracy"]] for h in history],
        )
    _write_csv(
        out_dir / "stages.csv",
        [
            "stage",
            "layer_index",
            "kept_k",
            "width_before",
            "width_after",
            "params_before",
            "params_after",
            "acc_before",
            "acc_after_projection",
            "acc_after_distill",
            "sigma_sq",
            "lambda_plus",
        ],
        [
            [
                i,
                r.layer_index,
                r.kept_k,
                r.width_before,
                r.width_after,
                r.params_before,
                r.params_after,
                _nan(r.acc_before),
                _nan(r.acc_after_projection),
                _nan(r.acc_after_distill),
                r.fitted.sigma_sq,
                r.fitted.lambda_plus,
            ]
            for i, r in enumerate(reports)
        ],
    )
    (out_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )
    print(
        f"reduction {summary['reduction']:.4f} "
        f"({summary['params_before']} -> {summary['params_after']} params), "
        f"test accuracy {summary['acc_before']:.4f} -> {summary['acc_after']:.4f}"
    )
    return EXIT_OK


def _nan(x: float | None) -> float:
    return float("nan") if x is None else float(x)


def cmd_sweep(args) -> int:
    out_dir = Path(args.out)
    dataset, model, history, mcfg, pcfg = _prepare_compress(args)
    quantiles = [float(q) for q in args.quantiles.split(",")]
    _write_run_config(
        out_dir,
        {
            "command": "sweep",
            "seed": args.seed,
            "data": args.data,
            "pretrained": args.pretrained,
            "quantiles": quantiles,
            "mlp": mcfg,
            "pipeline": pcfg,
        },
    )
    config = _pipeline_config(pcfg, args.seed)
    rows = cp.quantile_sweep(model, dataset, quantiles, config)
    cp.save_mlp_json(model, out_dir / "model_base.json")
    _write_csv(
        out_dir / "sweep.csv",
        ["quantile", "reduction", "accuracy"],
        [[r["quantile"], r["reduction"], r["accuracy"]] for r in rows],
    )
    for r in rows:
        print(
            f"quantile {r['quantile']:.2f}: reduction {r['reduction']:.4f}, "
            f"accuracy {r['accuracy']:.4f}"
        )
    return EXIT_OK


def cmd_report(args) -> int:
    out_dir = Path(args.out)
    report: dict = {"artifacts": {}}
    for name in (
        "run_config.json",
        "summary.json",
        "metrics.csv",
        "early_detection.csv",
        "ablation.csv",
        "sweep.csv",
        "cells.csv",
        "stages.csv",
    ):
        path = out_dir / name
        if not path.is_file():
            continue
        if name.endswith(".json"):
            report["artifacts"][name] = json.loads(path.read_text())
        else:
            lines = path.read_text().strip().split("\n")
            header = lines[0].split(",")
            rows = [line.split(",") for line in lines[1:]]
            report["artifacts"][name] = {"header": header, "rows": rows}
    if not report["artifacts"]:
        raise ActspecError(f"no known artifacts found in {out_dir}")
    (out_dir / "report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n"
    )
    print(f"report.json covers: {', '.join(sorted(report['artifacts']))}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="actspec",
        description="Spectral monitoring of activation traces and "
        "random-matrix-guided MLP compression.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("gen", help="generate a trace corpus or mixture dataset")
    common(p)
    p.add_argument("--kind", choices=["traces", "mixture"], default=None)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("extract", help="extract descriptor CSV from traces")
    common(p)
    p.add_argument("--traces", required=True, help="traces JSONL path")
    p.add_argument("--window-len", type=int, default=None)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("train-head", help="train the recurrent risk head")
    common(p)
    p.add_argument("--traces", required=True)
    p.add_argument("--window-len", type=int, default=None)
    p.add_argument(
        "--cell", choices=[*recurrent.CELL_KINDS, "all"], default=None
    )
    p.set_defaults(fn=cmd_train_head)

    p = sub.add_parser("eval", help="evaluate a trained head")
    common(p)
    p.add_argument("--traces", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--window-len", type=int, default=None)
    p.add_argument("--budgets", default=None, help="comma-separated token budgets")
    p.add_argument(
        "--ablation-windows", default=None, help="comma-separated window lengths"
    )
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("compress", help="run the compression pipeline")
    common(p)
    p.add_argument("--data", required=True, help="mixture CSV path")
    p.add_argument("--pretrained", default=None, help="model checkpoint JSON")
    p.set_defaults(fn=cmd_compress)

    p = sub.add_parser("sweep", help="quantile sweep of the pipeline")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pretrained", default=None)
    p.add_argument("--quantiles", default="0.3,0.5,0.7,0.9")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="aggregate artifacts in an output dir")
    common(p)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    start = time.perf_counter()
    try:
        code = args.fn(args)
    except AccuracyGateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GATE
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ActspecError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"done in {time.perf_counter() - start:.2f}s")
    return code


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
