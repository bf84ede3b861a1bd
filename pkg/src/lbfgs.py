"""
Row-batched L-BFGS with a strong-Wolfe line search.

Every row of the batch is an independent minimization problem. Each row runs
as a generator that yields trial points and receives (f, g) back; the driver
collects the pending trial points of all rows, evaluates them in one batched
call and hands the results back. Rows finish independently.

The line search and the cubic interpolation follow torch.optim's strong-Wolfe
implementation (itself a port of lswolfe.lua).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Generator, List, Optional, Tuple

import numpy as np

from .errors import ShapeMismatchError

logger = logging.getLogger(__name__)

# f(X_rows, row_indices) -> (values (k,), gradients (k, n))
BatchObjective = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]
Evaluation = Tuple[float, np.ndarray]
RowGenerator = Generator[np.ndarray, Evaluation, "RowResult"]

C1 = 1e-4
C2 = 0.9
MAX_LS = 25
CURVATURE_EPS = 1e-10


@dataclass
class RowResult:
    x: np.ndarray
    f: float
    grad_norm: float
    converged: bool
    iterations: int
    line_search_failures: int = 0


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: np.ndarray
    grad_norm: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    line_search_failures: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def n_failed(self) -> int:
        return int(np.sum(~self.converged))


def _cubic_interpolate(x1: float, f1: float, g1: float, x2: float, f2: float, g2: float,
                       bounds: Optional[Tuple[float, float]] = None) -> float:
    if bounds is not None:
        xmin_bound, xmax_bound = bounds
    else:
        xmin_bound, xmax_bound = (x1, x2) if x1 <= x2 else (x2, x1)
    # minimizer of the cubic through both points with their derivatives
    with np.errstate(all="ignore"):
        d1 = g1 + g2 - 3 * (f1 - f2) / (x1 - x2)
        d2_square = d1 ** 2 - g1 * g2
        if np.isfinite(d2_square) and d2_square >= 0:
            d2 = np.sqrt(d2_square)
            if x1 <= x2:
                min_pos = x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2 * d2))
            else:
                min_pos = x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2 * d2))
            if np.isfinite(min_pos):
                return float(min(max(min_pos, xmin_bound), xmax_bound))
    return float((xmin_bound + xmax_bound) / 2.0)


def _strong_wolfe(x: np.ndarray, t: float, d: np.ndarray, f: float, g: np.ndarray, gtd: float,
                  c1: float = C1, c2: float = C2, tolerance_change: float = 1e-14,
                  max_ls: int = MAX_LS) -> Generator[np.ndarray, Evaluation, Tuple[float, np.ndarray, float, bool]]:
    """
    Strong-Wolfe line search along ``d``; yields trial points.

    Near the minimizer f stops resolving the decrease, so the sufficient
    decrease test allows for rounding in f.
    """
    f_slack = 64 * np.finfo(float).eps * (1.0 + abs(f))
    d_norm = float(np.max(np.abs(d)))
    f_new, g_new = yield x + t * d
    gtd_new = float(g_new @ d)

    t_prev, f_prev, g_prev, gtd_prev = 0.0, f, g, gtd
    done = False
    ls_iter = 0
    while ls_iter < max_ls:
        if f_new > f + c1 * t * gtd + f_slack or (ls_iter > 1 and f_new >= f_prev):
            bracket = [t_prev, t]
            bracket_f = [f_prev, f_new]
            bracket_g = [g_prev, g_new.copy()]
            bracket_gtd = [gtd_prev, gtd_new]
            break
        if abs(gtd_new) <= -c2 * gtd:
            bracket, bracket_f, bracket_g, bracket_gtd = [t], [f_new], [g_new], [gtd_new]
            done = True
            break
        if gtd_new >= 0:
            bracket = [t_prev, t]
            bracket_f = [f_prev, f_new]
            bracket_g = [g_prev, g_new.copy()]
            bracket_gtd = [gtd_prev, gtd_new]
            break

        # extrapolate
        min_step = t + 0.01 * (t - t_prev)
        max_step = t * 10
        tmp = t
        t = _cubic_interpolate(t_prev, f_prev, gtd_prev, t, f_new, gtd_new, bounds=(min_step, max_step))
        t_prev, f_prev, g_prev, gtd_prev = tmp, f_new, g_new.copy(), gtd_new
        f_new, g_new = yield x + t * d
        gtd_new = float(g_new @ d)
        ls_iter += 1

    if ls_iter == max_ls:
        bracket, bracket_f, bracket_g, bracket_gtd = [0.0, t], [f, f_new], [g, g_new], [gtd, gtd_new]

    # zoom
    insuf_progress = False
    low_pos, high_pos = (0, 1) if bracket_f[0] <= bracket_f[-1] else (1, 0)
    while not done and ls_iter < max_ls:
        if abs(bracket[1] - bracket[0]) * d_norm < tolerance_change:
            break
        t = _cubic_interpolate(bracket[0], bracket_f[0], bracket_gtd[0],
                               bracket[1], bracket_f[1], bracket_gtd[1])
        eps = 0.1 * (max(bracket) - min(bracket))
        if min(max(bracket) - t, t - min(bracket)) < eps:
            if insuf_progress or t >= max(bracket) or t <= min(bracket):
                t = max(bracket) - eps if abs(t - max(bracket)) < abs(t - min(bracket)) else min(bracket) + eps
                insuf_progress = False
            else:
                insuf_progress = True
        else:
            insuf_progress = False

        f_new, g_new = yield x + t * d
        gtd_new = float(g_new @ d)
        ls_iter += 1

        if f_new > f + c1 * t * gtd + f_slack or f_new >= bracket_f[low_pos]:
            bracket[high_pos], bracket_f[high_pos] = t, f_new
            bracket_g[high_pos], bracket_gtd[high_pos] = g_new.copy(), gtd_new
            low_pos, high_pos = (0, 1) if bracket_f[0] <= bracket_f[1] else (1, 0)
        else:
            if abs(gtd_new) <= -c2 * gtd:
                done = True
            elif gtd_new * (bracket[high_pos] - bracket[low_pos]) >= 0:
                bracket[high_pos], bracket_f[high_pos] = bracket[low_pos], bracket_f[low_pos]
                bracket_g[high_pos], bracket_gtd[high_pos] = bracket_g[low_pos], bracket_gtd[low_pos]
            bracket[low_pos], bracket_f[low_pos] = t, f_new
            bracket_g[low_pos], bracket_gtd[low_pos] = g_new.copy(), gtd_new

    return bracket_f[low_pos], bracket_g[low_pos], bracket[low_pos], done


def lbfgs_row(x0: np.ndarray, f0: float, g0: np.ndarray, tol: float, max_iter: int,
              history: int) -> RowGenerator:
    """
    One L-BFGS minimization as a generator.

    Stops when ‖g‖₂ ≤ tol (converged), or when max_iter is reached, no
    descent direction is left or the step vanishes (not converged). The
    returned iterate is always the best point seen.
    """
    x, f, g = x0.copy(), float(f0), g0.copy()
    if np.linalg.norm(g) <= tol:
        return RowResult(x, f, float(np.linalg.norm(g)), True, 0)

    old_dirs: List[np.ndarray] = []
    old_stps: List[np.ndarray] = []
    ro: List[float] = []
    h_diag = 1.0
    d = -g
    t = min(1.0, 1.0 / float(np.sum(np.abs(g))))
    g_prev = g
    failures = 0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if it > 1:
            y = g - g_prev
            s = d * t
            ys = float(y @ s)
            if ys > CURVATURE_EPS:
                if len(old_dirs) == history:
                    old_dirs.pop(0)
                    old_stps.pop(0)
                    ro.pop(0)
                old_dirs.append(y)
                old_stps.append(s)
                ro.append(1.0 / ys)
                h_diag = ys / float(y @ y)

            # two-loop recursion
            q = -g
            al = [0.0] * len(old_dirs)
            for i in range(len(old_dirs) - 1, -1, -1):
                al[i] = float(old_stps[i] @ q) * ro[i]
                q = q - al[i] * old_dirs[i]
            d = q * h_diag
            for i in range(len(old_dirs)):
                be_i = float(old_dirs[i] @ d) * ro[i]
                d = d + old_stps[i] * (al[i] - be_i)
            t = 1.0

        g_prev = g.copy()
        gtd = float(g @ d)
        if not gtd < 0:
            logger.debug(f"no descent direction left at iteration {it}")
            break

        f_new, g_new, t, ok = yield from _strong_wolfe(x, t, d, f, g, gtd)
        if not ok:
            failures += 1
        if f_new <= f or np.linalg.norm(g_new) < np.linalg.norm(g):
            x = x + t * d
            f, g = float(f_new), np.asarray(g_new)
        else:
            break

        if np.linalg.norm(g) <= tol:
            converged = True
            break
        if np.max(np.abs(t * d)) <= 1e-16 * (1.0 + np.max(np.abs(x))):
            break

    return RowResult(x, f, float(np.linalg.norm(g)), converged, it, failures)


def minimize(fun: BatchObjective, x0: np.ndarray, tol: float = 1e-6, max_iter: int = 200,
             history: int = 10) -> LbfgsResult:
    """
    Minimize every row of ``x0`` independently.

    Args:
        fun: batched objective, called with the pending rows and their indices
        x0: (batch, n) starting points
        tol: gradient 2-norm stopping threshold
        max_iter: iteration cap per row
        history: curvature pairs kept per row

    Returns:
        LbfgsResult; rows that hit a stopping rule other than the gradient
        test keep their best iterate and are flagged non-converged.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    B, n = x0.shape
    if B == 0:
        return LbfgsResult(np.zeros((0, n)), np.zeros(0), np.zeros(0), np.zeros(0, dtype=bool),
                           np.zeros(0, dtype=int), np.zeros(0, dtype=int))

    f0, g0 = _evaluate(fun, x0, np.arange(B))
    results: Dict[int, RowResult] = {}
    gens: Dict[int, RowGenerator] = {}
    pending: Dict[int, np.ndarray] = {}
    for b in range(B):
        gen = lbfgs_row(x0[b], f0[b], g0[b], tol, max_iter, history)
        try:
            pending[b] = next(gen)
            gens[b] = gen
        except StopIteration as stop:
            results[b] = stop.value

    while pending:
        rows = np.fromiter(pending.keys(), dtype=int)
        points = np.stack([pending[b] for b in rows])
        f, g = _evaluate(fun, points, rows)
        pending = {}
        for i, b in enumerate(rows):
            try:
                pending[b] = gens[b].send((float(f[i]), g[i]))
            except StopIteration as stop:
                results[b] = stop.value
                del gens[b]

    ordered = [results[b] for b in range(B)]
    result = LbfgsResult(
        x=np.stack([r.x for r in ordered]),
        f=np.array([r.f for r in ordered]),
        grad_norm=np.array([r.grad_norm for r in ordered]),
        converged=np.array([r.converged for r in ordered], dtype=bool),
        iterations=np.array([r.iterations for r in ordered], dtype=int),
        line_search_failures=np.array([r.line_search_failures for r in ordered], dtype=int),
    )
    logger.debug(f"L-BFGS: {B} rows, {result.n_failed} not converged, "
                 f"max iterations {int(result.iterations.max())}")
    return result


def _evaluate(fun: BatchObjective, points: np.ndarray, rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    f, g = fun(points, rows)
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    g = np.asarray(g, dtype=np.float64)
    if f.shape[0] != points.shape[0] or g.shape != points.shape:
        raise ShapeMismatchError("lbfgs objective", -1, (points.shape, f.shape, g.shape),
                                 "objective must return one value and one gradient row per point")
    bad = ~np.isfinite(f) | ~np.all(np.isfinite(g), axis=1)
    if np.any(bad):
        # a non-finite trial point is treated as an infinitely bad one
        f = np.where(bad, np.inf, f)
        g = np.where(bad[:, None], 0.0, g)
    return f, g
