"""
Command line: ``cotlab <command> [options]``.

Exit codes: 0 on success, 2 on validation errors (bad config, data or
checkpoint), 3 on numerical failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, List, Optional

import numpy as np
import orjson
import pandas as pd
from dotenv import load_dotenv

from . import cot_flow, pcp_map, studies
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, FlowConfig, PcpTrainConfig, load_config, write_schemas
from .datasets import Dataset, load_dataset, preprocess_uci, save_dataset
from .errors import ConfigError, CotlabError, DatasetError, DivergenceError
from .experiment import evaluate_model, evaluation_split, full_training, pilot_search
from .gaussian_bench import default_spec, gaussian_bench, load_spec
from .logger import setup_logger
from .lotka_volterra import REFERENCE_RATES, build_lv_dataset, observe
from .metrics import metric_record
from .projection import project_y
from .reports import emit_report, load_records, write_table
from .settings import settings

logger = logging.getLogger("cotlab")

TRAIN_CONFIGS = {"pcp": PcpTrainConfig, "cot": FlowConfig}


def _out_dir(args) -> Path:
    path = Path(args.out_dir or settings.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _seed(args, fallback: Optional[int] = None) -> int:
    if args.seed is not None:
        return args.seed
    return settings.default_seed if fallback is None else fallback


def _write_json(data: Any, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps(data, option=orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY))
    logger.info(f"Wrote {path}")
    return path


# --- data -------------------------------------------------------------------------

def cmd_prepare(args) -> None:
    raw = Path(args.raw)
    if not raw.exists():
        raise DatasetError(f"raw table not found: {raw}")
    ds = preprocess_uci(pd.read_csv(raw), task=args.task, seed=_seed(args))
    ds.meta["raw"] = str(raw)
    if args.pca_y:
        ds = project_y(ds, args.pca_y)
    save_dataset(ds, args.out)
    logger.info(ds.describe())


def cmd_simulate_lv(args) -> None:
    ds = build_lv_dataset(args.n, _seed(args))
    save_dataset(ds, args.out)
    logger.info(ds.describe())


def cmd_gen_gauss(args) -> None:
    spec = load_spec(args.spec) if args.spec else default_spec()
    ds, oracle = gaussian_bench(spec, args.n, _seed(args))
    save_dataset(ds, args.out)
    logger.info(f"{ds.describe()}, conditional entropy {oracle.entropy:.4f} (normalized coordinates)")


# --- experiments ------------------------------------------------------------------

def _experiment_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("search needs --config <experiment.json>")
    config = load_config(args.config, ExperimentConfig)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    dataset = Path(config.dataset)
    if not dataset.is_absolute() and not dataset.exists():
        candidate = Path(args.config).parent / dataset
        if candidate.exists():
            config = config.model_copy(update={"dataset": str(candidate)})
    return config


def cmd_search(args) -> None:
    config = _experiment_config(args)
    dataset = load_dataset(config.dataset)
    out = _out_dir(args)
    ranked = pilot_search(config, dataset, out_dir=out, workers=args.workers)
    _write_json([{"rank": p.rank, "tuple_index": p.tuple_index, "valid_loss": p.valid_loss
                  if p.record.ok else None, "status": p.record.status, "params": p.params} for p in ranked],
                out / "pilot_ranking.json")
    report = full_training(config, ranked, dataset, out_dir=out, workers=args.workers)
    emit_report([p.record for p in ranked] + report.records, out, reports=[report])


def _save_run(model, record, config, args, run_id: str) -> None:
    out = _out_dir(args)
    path = save_checkpoint(model, args.out or out / "checkpoints" / f"{run_id}.json",
                           config=config.model_dump(), meta={"dataset": str(args.dataset), "seed": config.seed})
    record.checkpoint = str(path)
    record.save(out / "runs" / f"{run_id}.json")


def cmd_train(args) -> None:
    cls = TRAIN_CONFIGS[args.model]
    config = load_config(args.config, cls) if args.config else cls()
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    dataset = load_dataset(args.dataset)
    resume = None
    if args.resume:
        resume, _, _ = load_checkpoint(args.resume, expected=args.model)
    run_id = args.run_id or f"{args.model}-{config.seed}"
    try:
        if args.model == "pcp":
            model, record = pcp_map.train(config, dataset, run_id=run_id, model=resume)
        else:
            model, record = cot_flow.train_flow(config, dataset, run_id=run_id, model=resume)
    except DivergenceError as exc:
        _save_run(exc.last_good, exc.record, config, args, run_id)
        logger.warning(f"{run_id}: the checkpoint holds the last good weights")
        raise
    if args.evaluate:
        metrics = evaluate_model(model, dataset, args.kernel, seed=config.seed)
        for name in ("test_nll", "mmd"):
            record.set_metric(name, metrics[name])
        logger.info(f"test NLL {metrics['test_nll']:.4f}, MMD {metrics['mmd']:.3e}")
    _save_run(model, record, config, args, run_id)


def cmd_sample(args) -> None:
    model, _, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    seed = _seed(args)
    if args.row is not None:
        _, Y = evaluation_split(dataset)
        if not 0 <= args.row < len(Y):
            raise ConfigError(f"row {args.row} is outside the evaluation split (size {len(Y)})")
        draws = studies.sample_posterior(model, Y[args.row], args.n, seed)
        X, Yd = dataset.denormalize_x(draws.x), np.repeat(dataset.denormalize_y(Y[args.row:args.row + 1]), args.n, 0)
    elif model.joint:
        if isinstance(model, pcp_map.PcpModel):
            ys, xs = pcp_map.sample_joint(model, args.n, seed=seed)
        else:
            ys, xs = cot_flow.sample_joint(model, args.n, seed)
        X, Yd = dataset.denormalize_x(xs.x), dataset.denormalize_y(ys.x)
    else:
        _, Y = evaluation_split(dataset)
        draws = model.sample(Y, seed)
        X, Yd = dataset.denormalize_x(draws.x), dataset.denormalize_y(Y)
    frame = pd.DataFrame(np.hstack([X, Yd]), columns=list(dataset.x_columns) + list(dataset.y_columns))
    path = Path(args.out) if args.out else _out_dir(args) / "samples.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10g")
    logger.info(f"Wrote {len(frame)} samples to {path}")


def _observation(dataset: Dataset, seed: int) -> np.ndarray:
    """Conditioning vector for single-observation studies, normalized."""
    if dataset.meta.get("source") == "lotka_volterra":
        return dataset.normalize_y(observe(REFERENCE_RATES, seed=seed)[None, :])[0]
    _, Y = evaluation_split(dataset)
    return Y[0]


def _parse_rates(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--rates must be comma-separated numbers, got '{text}'") from exc


def cmd_eval(args) -> None:
    model, config, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    out = _out_dir(args)
    seed = _seed(args)
    if args.study == "nll":
        metrics = evaluate_model(model, dataset, args.kernel, args.mmd_samples, seed=seed)
        records = [metric_record(name, metrics[name], config=config) for name in ("test_nll", "mmd")]
        _write_json(records, out / "eval.json")
        logger.info(f"test NLL {metrics['test_nll']:.4f}, MMD {metrics['mmd']:.3e}")
    elif args.study == "nt":
        write_table(studies.nt_study(model, dataset, seed=seed), "nt_errors", out)
    elif args.study == "efficiency":
        frame = studies.efficiency_study(model, _observation(dataset, seed), N=args.n, seed=seed)
        write_table(frame, "efficiency", out)
    elif args.study == "sbc":
        result = studies.sbc_study(model, dataset, M=args.M, L=args.L, seed=seed)
        write_table(studies.sbc_frame(result), "sbc_cdf", out)
        _write_json({"ks": result.ks().tolist(), "M": result.M, "L": result.L,
                     "non_converged_pairs": int((result.non_converged > 0).sum())}, out / "sbc.json")
    elif args.study == "lv":
        rates = _parse_rates(args.rates) if args.rates else list(REFERENCE_RATES)
        posterior = studies.lv_posterior(model, dataset, rates, N=args.n, seed=seed)
        names = [c.removeprefix("log_") for c in dataset.x_columns]
        write_table(studies.histogram_frame(posterior.rates, args.bins, names), "histograms", out)
        _write_json({"true": posterior.true_rates, "map": posterior.map_rates,
                     "log10_median": posterior.log10_medians(), "non_converged": posterior.non_converged},
                    out / "lv_posterior.json")


def cmd_report(args) -> None:
    out = _out_dir(args)
    records = load_records(args.runs or out)
    emit_report(records, out)


def cmd_schema(args) -> None:
    for name, path in write_schemas(args.out_dir or "schemas").items():
        logger.info(f"{name}: {path}")


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="Master seed (default: COTLAB_DEFAULT_SEED)")
    common.add_argument("--out-dir", help="Output directory (default: COTLAB_OUT_DIR)")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        type=str.upper, help="Logging level (default: COTLAB_LOG_LEVEL)")
    common.add_argument("--log-file", help="Optional log file")

    parser = argparse.ArgumentParser(prog="cotlab", description="Conditional optimal transport experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="Preprocess a raw UCI table")
    p.add_argument("--raw", required=True, help="Raw CSV with a header row")
    p.add_argument("--task", choices=["joint", "conditional"], default="conditional")
    p.add_argument("--pca-y", type=int, help="Project y onto its top-k principal directions")
    p.add_argument("--out", required=True, help="Dataset CSV to write")
    p.set_defaults(handler=cmd_prepare)

    p = sub.add_parser("simulate-lv", parents=[common], help="Simulate a Lotka–Volterra training set")
    p.add_argument("--n", type=int, default=10_000, help="Number of simulations")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_simulate_lv)

    p = sub.add_parser("gen-gauss", parents=[common], help="Draw a joint-Gaussian benchmark dataset")
    p.add_argument("--spec", help="JSON with mean, cov and n (default: built-in 2+1 benchmark)")
    p.add_argument("--n", type=int, default=20_000)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_gen_gauss)

    p = sub.add_parser("search", parents=[common], help="Pilot search then full training")
    p.add_argument("--workers", type=int, help="Worker processes (default: COTLAB_WORKERS)")
    p.set_defaults(handler=cmd_search)

    p = sub.add_parser("train", parents=[common], help="Train one configuration")
    p.add_argument("--model", choices=sorted(TRAIN_CONFIGS), required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--resume", help="Checkpoint to continue from")
    p.add_argument("--run-id")
    p.add_argument("--out", help="Checkpoint path")
    p.add_argument("--evaluate", action="store_true", help="Report test NLL and MMD after training")
    p.add_argument("--kernel", choices=["unit", "plain"], default="unit")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="Draw samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--row", type=int, help="Evaluation-split row to condition on (posterior draws)")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--out", help="CSV to write")
    p.set_defaults(handler=cmd_sample)

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--study", choices=["nll", "nt", "efficiency", "sbc", "lv"], default="nll")
    p.add_argument("--kernel", choices=["unit", "plain"], default="unit")
    p.add_argument("--mmd-samples", type=int, default=2000)
    p.add_argument("--n", type=int, default=2000, help="Posterior draws (efficiency, lv)")
    p.add_argument("--M", type=int, default=200, help="SBC pairs")
    p.add_argument("--L", type=int, default=100, help="SBC posterior draws per pair")
    p.add_argument("--rates", help="Comma-separated true rates for the lv study")
    p.add_argument("--bins", type=int, default=30)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="Rebuild report tables from run records")
    p.add_argument("--runs", help="Directory of run records (default: --out-dir)")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("schema", parents=[common], help="Write config JSON schemas")
    p.set_defaults(handler=cmd_schema)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    level = args.log_level or settings.log_level
    setup_logger("src", level, args.log_file)
    setup_logger("cotlab", level, args.log_file)
    try:
        args.handler(args)
    except CotlabError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
