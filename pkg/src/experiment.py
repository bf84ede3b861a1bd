"""
Two-stage hyperparameter search and repeated full training.

Stage one trains every sampled tuple for a few pilot epochs and ranks the
tuples by validation loss; stage two retrains the top tuples several times
with fresh seeds and reports best, median and worst test results.

Seeds: master → ("tuple", i) for the pilot run of tuple i →
("tuple", i, "repeat", r) for its full-training repeats.
"""

from __future__ import annotations

import concurrent.futures
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from . import cot_flow, pcp_map
from .checkpoint import encode
from .config import ExperimentConfig, SampleConfig
from .datasets import Dataset
from .errors import CotlabError, DivergenceError
from .logger import progress_enabled
from .metrics import mmd, test_nll
from .records import STATUS_FAILED, RunRecord
from .search import SearchSpace, preset_manager, sample_space, train_config
from .seeding import derive_seed
from .settings import settings

logger = logging.getLogger(__name__)

Model = Union[pcp_map.PcpModel, cot_flow.FlowModel]


# --- evaluation -------------------------------------------------------------------

def evaluation_split(dataset: Dataset):
    """Test split, or the validation split when there is no test split."""
    X, Y = dataset.test
    if len(X) == 0:
        X, Y = dataset.valid
    return X, Y


def generate(model: Model, Y: np.ndarray, seed: int, sampling: Optional[SampleConfig] = None):
    """
    Model draws matching the rows of a held-out split.

    Conditional models draw one x per row of Y; joint models draw len(Y)
    fresh (x, y) pairs. Returns (X, Y, non-converged count).
    """
    if model.joint:
        if isinstance(model, pcp_map.PcpModel):
            ys, xs = pcp_map.sample_joint(model, len(Y), sampling or model.sampling, seed)
        else:
            ys, xs = cot_flow.sample_joint(model, len(Y), seed)
        return xs.x, ys.x, ys.n_failed + xs.n_failed
    draws = model.sample(Y, seed, sampling)
    return draws.x, Y, draws.n_failed


def evaluate_model(model: Model, dataset: Dataset, kernel: str = "unit", mmd_samples: int = 2000,
                   seed: int = 0, sampling: Optional[SampleConfig] = None) -> Dict[str, Any]:
    """Test NLL on the full split and MMD of model draws against its first rows."""
    X, Y = evaluation_split(dataset)
    nll = test_nll(model, X, Y)
    rows = min(len(X), mmd_samples)
    X_gen, Y_gen, failed = generate(model, Y[:rows], seed, sampling)
    result = mmd(np.hstack([X_gen, Y_gen]), np.hstack([X[:rows], Y[:rows]]), kernel=kernel)
    return {"test_nll": nll, "mmd": result.value, "mmd_bandwidth": result.bandwidth,
            "non_converged": failed}


# --- jobs ---------------------------------------------------------------------------

@dataclass
class TrainJob:
    model: str
    params: Dict[str, Any]
    dataset: Dataset
    run_id: str
    seed: int
    epochs: int
    joint: bool = False
    evaluate: bool = False
    kernel: str = "unit"
    mmd_samples: int = 2000
    sampling: Optional[Dict[str, Any]] = None
    tuple_index: int = 0
    repeat: int = 0


@dataclass
class JobResult:
    record: RunRecord
    params: Dict[str, Any]
    tuple_index: int
    repeat: int
    checkpoint: Optional[bytes] = None


def run_job(job: TrainJob) -> JobResult:
    """Train (and optionally evaluate) one configuration; never raises on model failure."""
    overrides: Dict[str, Any] = {"epochs": job.epochs, "seed": job.seed, "joint": job.joint}
    if job.model == "pcp" and job.sampling is not None:
        overrides["sampling"] = job.sampling
    try:
        cfg = train_config(job.model, job.params, **overrides)
        if job.model == "pcp":
            model, record = pcp_map.train(cfg, job.dataset, run_id=job.run_id)
        else:
            model, record = cot_flow.train_flow(cfg, job.dataset, run_id=job.run_id)
    except DivergenceError as exc:
        model, record = exc.last_good, exc.record
    except CotlabError as exc:
        logger.warning(f"{job.run_id}: training failed: {exc}")
        record = RunRecord(run_id=job.run_id, model=job.model, config=dict(job.params), seed=job.seed,
                           status=STATUS_FAILED, flags={"error": str(exc)})
        return JobResult(record, job.params, job.tuple_index, job.repeat)

    record.flags.update(tuple_index=job.tuple_index, repeat=job.repeat)
    if job.evaluate and record.ok:
        try:
            metrics = evaluate_model(model, job.dataset, job.kernel, job.mmd_samples,
                                     seed=derive_seed(job.seed, "eval"))
            for name in ("test_nll", "mmd"):
                record.set_metric(name, metrics[name])
            record.flags["non_converged"] = metrics["non_converged"]
        except CotlabError as exc:
            logger.warning(f"{job.run_id}: evaluation failed: {exc}")
            record.status = STATUS_FAILED
            record.flags["error"] = str(exc)
    return JobResult(record, job.params, job.tuple_index, job.repeat, encode(model, config=record.config))


def run_jobs(jobs: Sequence[TrainJob], workers: Optional[int] = None, desc: str = "Runs") -> List[JobResult]:
    """Run independent jobs on a bounded process pool; results come back in job order."""
    workers = max(1, int(workers or settings.workers))
    results: List[JobResult] = []
    bar = tqdm(total=len(jobs), desc=desc, leave=False, disable=not progress_enabled())
    if workers == 1 or len(jobs) <= 1:
        for job in jobs:
            results.append(run_job(job))
            bar.update(1)
    else:
        logger.info(f"Running {len(jobs)} jobs on {workers} workers")
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
            futures = {executor.submit(run_job, job): job for job in jobs}
            for future in concurrent.futures.as_completed(futures):
                job = futures[future]
                try:
                    results.append(future.result())
                except Exception as exc:
                    logger.error(f"{job.run_id}: worker error: {exc}", exc_info=True)
                    record = RunRecord(run_id=job.run_id, model=job.model, config=dict(job.params),
                                       seed=job.seed, status=STATUS_FAILED, flags={"error": str(exc)})
                    results.append(JobResult(record, job.params, job.tuple_index, job.repeat))
                bar.update(1)
    bar.close()
    results.sort(key=lambda r: (r.tuple_index, r.repeat))
    return results


def _persist(results: Sequence[JobResult], out_dir: Optional[Path], sub: str, checkpoints: bool = False) -> None:
    if out_dir is None:
        return
    for result in results:
        if checkpoints and result.checkpoint is not None:
            path = out_dir / "checkpoints" / f"{result.record.run_id}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(result.checkpoint)
            result.record.checkpoint = str(path)
        result.record.save(out_dir / sub / f"{result.record.run_id}.json")


# --- pilot search -----------------------------------------------------------------

@dataclass
class PilotResult:
    rank: int
    tuple_index: int
    params: Dict[str, Any]
    record: RunRecord

    @property
    def valid_loss(self) -> float:
        return self.record.final_valid if self.record.ok else math.inf


def rank_results(results: Sequence[JobResult]) -> List[PilotResult]:
    """
    Sort by the validation loss at the end of the pilot run; failed or
    diverged runs go last in input order.
    """
    def key(r: JobResult):
        loss = r.record.final_valid if r.record.ok else math.inf
        return (not r.record.ok or not math.isfinite(loss), loss, r.tuple_index)

    ordered = sorted(results, key=key)
    return [PilotResult(rank=i, tuple_index=r.tuple_index, params=r.params, record=r.record)
            for i, r in enumerate(ordered)]


def pilot_search(config: ExperimentConfig, dataset: Dataset, space: Optional[SearchSpace] = None,
                 out_dir: Optional[str | Path] = None, workers: Optional[int] = None) -> List[PilotResult]:
    """
    Train every sampled tuple for ``config.pilot_epochs`` and rank them.

    Every pilot RunRecord is written to ``<out_dir>/pilot/``.
    """
    space = space or preset_manager.get_space(config.model, config.preset)
    tuples = sample_space(space, config.pilot_tuples, config.seed, config.model, m=dataset.m)
    jobs = [
        TrainJob(model=config.model, params=params, dataset=dataset, run_id=f"pilot-{i:03d}",
                 seed=derive_seed(config.seed, "tuple", i), epochs=config.pilot_epochs,
                 joint=config.task == "joint", sampling=config.sampling.model_dump(), tuple_index=i)
        for i, params in enumerate(tuples)
    ]
    results = run_jobs(jobs, workers, desc="Pilot")
    _persist(results, Path(out_dir) if out_dir else None, "pilot")
    ranked = rank_results(results)
    failed = sum(1 for r in ranked if not r.record.ok)
    if failed:
        logger.warning(f"Pilot: {failed} of {len(ranked)} tuples failed or diverged")
    if ranked:
        logger.info(f"Pilot: best tuple {ranked[0].tuple_index} with validation loss {ranked[0].valid_loss:.4f}")
    return ranked


# --- full training ----------------------------------------------------------------

@dataclass
class TupleSummary:
    tuple_index: int
    params: Dict[str, Any]
    values: Dict[str, List[float]] = field(default_factory=dict)

    def mean(self, metric: str) -> float:
        v = self.values.get(metric, [])
        return float(np.mean(v)) if v else math.nan

    def std(self, metric: str) -> float:
        v = self.values.get(metric, [])
        return float(np.std(v)) if v else math.nan


@dataclass
class TrainingReport:
    model: str
    tuples: List[TupleSummary]
    records: List[RunRecord]

    def rows(self, metrics: Sequence[str] = ("test_nll", "mmd")) -> List[Dict[str, Any]]:
        """Best, median and worst tuple per metric, each as mean ± std over its repeats."""
        out = []
        for metric in metrics:
            scored = sorted((t for t in self.tuples if math.isfinite(t.mean(metric))),
                            key=lambda t: (t.mean(metric), t.tuple_index))
            if not scored:
                continue
            picks = {"best": scored[0], "median": scored[(len(scored) - 1) // 2], "worst": scored[-1]}
            for statistic, summary in picks.items():
                out.append({
                    "model": self.model,
                    "metric": metric,
                    "statistic": statistic,
                    "mean": summary.mean(metric),
                    "std": summary.std(metric),
                    "runs": len(summary.values.get(metric, [])),
                    "tuple_index": summary.tuple_index,
                })
        return out


def full_training(config: ExperimentConfig, ranked: Sequence[PilotResult], dataset: Dataset,
                  repeats: Optional[int] = None, out_dir: Optional[str | Path] = None,
                  workers: Optional[int] = None) -> TrainingReport:
    """Retrain the top ``config.top_k`` tuples ``repeats`` times each and evaluate them."""
    repeats = repeats or config.repeats
    top = list(ranked)[:config.top_k]
    jobs = [
        TrainJob(model=config.model, params=p.params, dataset=dataset,
                 run_id=f"full-{p.tuple_index:03d}-r{r}",
                 seed=derive_seed(config.seed, "tuple", p.tuple_index, "repeat", r),
                 epochs=config.full_epochs, joint=config.task == "joint", evaluate=True,
                 kernel=config.mmd_kernel, mmd_samples=config.mmd_samples,
                 sampling=config.sampling.model_dump(), tuple_index=p.tuple_index, repeat=r)
        for p in top for r in range(repeats)
    ]
    results = run_jobs(jobs, workers, desc="Full training")
    _persist(results, Path(out_dir) if out_dir else None, "full", checkpoints=True)

    summaries: Dict[int, TupleSummary] = {p.tuple_index: TupleSummary(p.tuple_index, p.params) for p in top}
    for result in results:
        summary = summaries[result.tuple_index]
        for metric, value in result.record.metrics.items():
            if value is not None:
                summary.values.setdefault(metric, []).append(value)
    failed = [r.record.run_id for r in results if not r.record.ok]
    if failed:
        logger.warning(f"Full training: {len(failed)} runs failed or diverged: {', '.join(failed)}")
    report = TrainingReport(model=config.model, tuples=list(summaries.values()),
                            records=[r.record for r in results])
    for row in report.rows(("test_nll",)):
        logger.info(f"{row['statistic']:>6}: test NLL {row['mean']:.4f} ± {row['std']:.4f} "
                    f"(tuple {row['tuple_index']})")
    return report
