"""
Minibatch training loop shared by both transport models.

Models are passed as a dict of role -> ParamSet ("x", "y", ...). The loop
runs Adam on shuffled minibatches, applies a feasibility hook after every
step, checks the validation objective every ``val_interval`` steps and keeps
the parameters with the best validation value.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from tqdm import tqdm

from .autodiff import Tape, Tensor
from .errors import AutodiffUsageError, DivergenceError, NumericalError
from .logger import progress_enabled
from .optim import Adam
from .potentials import ParamSet
from .records import STATUS_DIVERGED, RunRecord

logger = logging.getLogger(__name__)

Models = Dict[str, ParamSet]
LossFn = Callable[[Models, np.ndarray, np.ndarray], Tensor]
ValueFn = Callable[[Models, np.ndarray, np.ndarray], float]
Hook = Callable[[Models], Models]


@dataclass
class LoopSettings:
    batch_size: int
    learning_rate: float
    epochs: int
    seed: int
    val_interval: int
    patience: int


def flatten(models: Models) -> Dict[str, np.ndarray]:
    return {f"{role}/{key}": value for role, p in models.items() for key, value in p.numpy().items()}


def unflatten(models: Models, flat: Dict[str, np.ndarray]) -> Models:
    out = {}
    for role, p in models.items():
        prefix = f"{role}/"
        out[role] = p.with_arrays({k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix)})
    return out


def copy_models(models: Models) -> Models:
    return {role: p.copy() for role, p in models.items()}


def value_and_grad(loss_fn: LossFn, models: Models, x: np.ndarray, y: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss value and its gradient for every parameter array, keyed "role/name"."""
    tape = Tape()
    bound = {role: p.bind(tape) for role, p in models.items()}
    loss = loss_fn(bound, x, y)
    if loss.shape != (1, 1):
        raise AutodiffUsageError(f"training loss must be scalar, got shape {loss.shape}")
    keys = [(role, key) for role, p in bound.items() for key in p.arrays]
    grads = tape.grad(loss, [bound[role].arrays[key] for role, key in keys])
    return float(loss.value[0, 0]), {f"{role}/{key}": g.value for (role, key), g in zip(keys, grads)}


def chunked_mean(fn: Callable[[np.ndarray, np.ndarray], np.ndarray], x: np.ndarray, y: np.ndarray,
                 chunk: int) -> float:
    """Mean of a per-row function evaluated in row chunks."""
    if len(x) == 0:
        return math.nan
    total = 0.0
    for start in range(0, len(x), chunk):
        values = fn(x[start:start + chunk], y[start:start + chunk])
        total += float(np.sum(values))
    return total / len(x)


def fit(
    models: Models,
    loss_fn: LossFn,
    val_fn: ValueFn,
    train: Tuple[np.ndarray, np.ndarray],
    valid: Tuple[np.ndarray, np.ndarray],
    settings: LoopSettings,
    record: RunRecord,
    hook: Optional[Hook] = None,
) -> Models:
    """
    Train ``models`` and return the best-validation copy.

    Divergence (a non-finite loss or gradient, or any NumericalError during a
    step) stops the run, marks the record as diverged and raises
    DivergenceError carrying the last parameters that validated.

    Args:
        models: initial parameters per role
        loss_fn: training loss on a minibatch, recorded on the tape
        val_fn: reported validation objective on a whole split
        train: (X, Y) training split
        valid: (X, Y) validation split, may be empty
        settings: loop settings
        record: run record to fill in
        hook: feasibility map applied after every step (projection or clamp)

    Returns:
        Parameters with the best validation value

    Raises:
        DivergenceError: with ``last_good`` and the filled-in ``record``
    """
    started = time.perf_counter()
    hook = hook or (lambda m: m)
    X, Y = train
    Xv, Yv = valid
    has_valid = len(Xv) > 0
    rng = np.random.default_rng(settings.seed)
    opt = Adam(lr=settings.learning_rate)

    current = copy_models(models)
    best = copy_models(current)
    best_val = math.inf
    if has_valid and settings.epochs > 0:
        try:
            initial = val_fn(current, Xv, Yv)
        except NumericalError as exc:
            logger.warning(f"{record.run_id}: initial validation failed: {exc}")
            initial = math.nan
        record.log_valid(0, initial)
        if math.isfinite(initial):
            best_val = initial

    step = 0
    stall = 0
    stop = False
    n = len(X)
    epochs = tqdm(range(settings.epochs), desc=record.run_id, leave=False, disable=not progress_enabled())
    for epoch in epochs:
        perm = rng.permutation(n)
        for start in range(0, n, settings.batch_size):
            idx = perm[start:start + settings.batch_size]
            try:
                loss, grads = value_and_grad(loss_fn, current, X[idx], Y[idx])
            except NumericalError as exc:
                logger.warning(f"{record.run_id}: numerical failure at step {step + 1}: {exc}")
                loss, grads = math.nan, {}
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                record.status = STATUS_DIVERGED
                record.flags["diverged_at_step"] = step + 1
                logger.warning(f"{record.run_id}: training diverged at step {step + 1}, keeping last good parameters")
                stop = True
                break

            updated = hook(unflatten(current, opt.step(flatten(current), grads)))
            if not all(np.all(np.isfinite(v)) for v in flatten(updated).values()):
                record.status = STATUS_DIVERGED
                record.flags["diverged_at_step"] = step + 1
                logger.warning(f"{record.run_id}: parameters left the finite range at step {step + 1}")
                stop = True
                break
            current = updated
            step += 1
            record.log_train(step, loss)

            if has_valid and step % settings.val_interval == 0:
                stall, best, best_val, stop = _validate(current, best, best_val, stall, val_fn, valid,
                                                        settings, record, step)
                if stop:
                    break
        epochs.set_postfix(step=step, best_val=f"{best_val:.4f}")
        logger.debug(f"{record.run_id}: epoch {epoch + 1} done, step {step}, best validation {best_val:.5f}")
        if stop:
            break

    if record.status != STATUS_DIVERGED and has_valid and step > 0 and step % settings.val_interval != 0:
        _, best, best_val, _ = _validate(current, best, best_val, stall, val_fn, valid, settings, record, step)

    record.wall_clock = time.perf_counter() - started
    record.flags["steps"] = step
    if not has_valid:
        best = current
    logger.info(f"{record.run_id}: {step} steps, best validation {best_val:.5f}, status {record.status}")
    if record.status == STATUS_DIVERGED:
        raise DivergenceError(f"{record.run_id} diverged at step {record.flags['diverged_at_step']}",
                              last_good=best, record=record)
    return best


def _validate(current: Models, best: Models, best_val: float, stall: int, val_fn: ValueFn,
              valid: Tuple[np.ndarray, np.ndarray], settings: LoopSettings, record: RunRecord,
              step: int) -> Tuple[int, Models, float, bool]:
    try:
        value = val_fn(current, *valid)
    except NumericalError as exc:
        logger.warning(f"{record.run_id}: validation failed at step {step}: {exc}")
        value = math.nan
    record.log_valid(step, value)
    if not math.isfinite(value):
        record.status = STATUS_DIVERGED
        record.flags["diverged_at_step"] = step
        return stall, best, best_val, True
    if value < best_val:
        return 0, copy_models(current), value, False
    stall += 1
    if stall >= settings.patience:
        logger.info(f"{record.run_id}: early stop at step {step} after {stall} checks without improvement")
        return stall, best, best_val, True
    return stall, best, best_val, False
