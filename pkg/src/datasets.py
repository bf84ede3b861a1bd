"""
Paired (x, y) datasets: splits, normalization, UCI-style preprocessing and
CSV storage with a JSON sidecar.

Dataset files are a CSV (header row, x-columns then y-columns, raw values)
next to ``<csv>.meta.json`` holding column roles, split indices and the
training-split normalization statistics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import orjson
import pandas as pd

from .errors import DatasetError

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
META_VERSION = 1
TASKS = ("joint", "conditional", "lfi")


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    splits: Dict[str, np.ndarray]
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    x_columns: List[str] = field(default_factory=list)
    y_columns: List[str] = field(default_factory=list)
    task: str = "conditional"
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=np.float64))
        if self.X.shape[0] != self.Y.shape[0]:
            raise DatasetError(f"X has {self.X.shape[0]} rows but Y has {self.Y.shape[0]}")
        if self.task not in TASKS:
            raise DatasetError(f"unknown task '{self.task}', expected one of {TASKS}")
        self.splits = {name: np.asarray(self.splits.get(name, []), dtype=int) for name in SPLITS}
        joined = np.concatenate([self.splits[name] for name in SPLITS])
        if len(joined) != self.size or not np.array_equal(np.sort(joined), np.arange(self.size)):
            raise DatasetError("splits must be disjoint and cover every row exactly once")
        for label, std in (("x", self.x_std), ("y", self.y_std)):
            if np.any(~np.isfinite(std)) or np.any(std <= 0):
                raise DatasetError(f"{label}-columns need a positive training std, got {std}")
        if not self.x_columns:
            self.x_columns = [f"x{i}" for i in range(self.n)]
        if not self.y_columns:
            self.y_columns = [f"y{i}" for i in range(self.m)]

    @classmethod
    def build(cls, X, Y, splits: Dict[str, np.ndarray], allow_constant: bool = False, **kwargs) -> "Dataset":
        """
        Create a dataset whose normalization uses the training split only.

        With ``allow_constant`` a column that is constant on the training split
        (always the case for a one-row split) keeps unit scale and is only
        centered; otherwise it is rejected.
        """
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        train = np.asarray(splits["train"], dtype=int)
        if len(train) == 0:
            raise DatasetError("the training split is empty")
        x_std, y_std = X[train].std(axis=0), Y[train].std(axis=0)
        if allow_constant:
            flat = int(np.sum(x_std <= 0) + np.sum(y_std <= 0))
            if flat:
                logger.warning(f"{flat} columns are constant on {len(train)} training rows, keeping unit scale")
            x_std, y_std = np.where(x_std > 0, x_std, 1.0), np.where(y_std > 0, y_std, 1.0)
        return cls(X=X, Y=Y, splits=splits, x_mean=X[train].mean(axis=0), x_std=x_std,
                   y_mean=Y[train].mean(axis=0), y_std=y_std, **kwargs)

    @property
    def size(self) -> int:
        return int(self.X.shape[0])

    @property
    def n(self) -> int:
        return int(self.X.shape[1])

    @property
    def m(self) -> int:
        return int(self.Y.shape[1])

    # --- normalization ----------------------------------------------------

    def normalize_x(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_std

    def denormalize_x(self, Xn) -> np.ndarray:
        return np.asarray(Xn, dtype=np.float64) * self.x_std + self.x_mean

    def normalize_y(self, Y) -> np.ndarray:
        return (np.asarray(Y, dtype=np.float64) - self.y_mean) / self.y_std

    def denormalize_y(self, Yn) -> np.ndarray:
        return np.asarray(Yn, dtype=np.float64) * self.y_std + self.y_mean

    def part(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        """Normalized (X, Y) of one split."""
        if name not in SPLITS:
            raise DatasetError(f"unknown split '{name}'")
        idx = self.splits[name]
        return self.normalize_x(self.X[idx]), self.normalize_y(self.Y[idx])

    @property
    def train(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.part("train")

    @property
    def valid(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.part("valid")

    @property
    def test(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.part("test")

    def describe(self) -> str:
        sizes = ", ".join(f"{name}={len(self.splits[name])}" for name in SPLITS)
        return f"Dataset(task={self.task}, n={self.n}, m={self.m}, {sizes})"


# --- splits -------------------------------------------------------------------

def split_indices(N: int, fractions: Sequence[float] = (0.8, 0.1), seed: int = 0) -> Dict[str, np.ndarray]:
    """
    Shuffled train/valid/test index sets.

    Sizes are int(f·N) for the listed fractions; the test split takes the
    rest (1030 rows -> 824/103/103 with the default 8:1:1).
    """
    if N < 1:
        raise DatasetError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(N)
    n_train = int(fractions[0] * N)
    n_valid = int(fractions[1] * N) if len(fractions) > 1 else N - n_train
    n_train = max(n_train, 1)
    return {
        "train": np.sort(perm[:n_train]),
        "valid": np.sort(perm[n_train:n_train + n_valid]),
        "test": np.sort(perm[n_train + n_valid:]),
    }


# --- UCI preprocessing -----------------------------------------------------------

def discrete_columns(table: pd.DataFrame, max_levels: int = 10) -> List[str]:
    """Integer-valued columns with at most ``max_levels`` distinct values."""
    found = []
    for name in table.columns:
        values = table[name].to_numpy(dtype=np.float64)
        if np.all(values == np.round(values)) and len(np.unique(values)) <= max_levels:
            found.append(name)
    return found


def correlated_columns(table: pd.DataFrame, threshold: float = 0.98) -> List[str]:
    """
    Columns to drop so that no kept pair has Pearson r > threshold.

    Scans left to right and keeps the first column of each correlated pair.
    The rule is signed: strongly anti-correlated pairs are both kept.
    """
    corr = table.corr(method="pearson").to_numpy()
    names = list(table.columns)
    kept: List[int] = []
    dropped = []
    for j in range(len(names)):
        if any(corr[i, j] > threshold for i in kept):
            dropped.append(names[j])
        else:
            kept.append(j)
    return dropped


def preprocess_uci(table: pd.DataFrame, task: str = "conditional", seed: int = 0,
                   discrete_max_levels: int = 10, corr_threshold: float = 0.98) -> Dataset:
    """
    Clean a numeric table and cut it into an (x, y) dataset.

    Args:
        table: raw table with a header row
        task: "joint" puts the second half of the features in x, "conditional"
            puts the last feature in x; y is the rest
        seed: split seed
        discrete_max_levels: level cap below which integer columns count as discrete
        corr_threshold: signed Pearson threshold for dropping duplicates

    Returns:
        Normalized Dataset with an 8:1:1 split
    """
    if task not in ("joint", "conditional"):
        raise DatasetError(f"UCI preprocessing supports joint or conditional tasks, not '{task}'")
    numeric = table.select_dtypes(include=[np.number])
    skipped = [c for c in table.columns if c not in numeric.columns]
    if skipped:
        logger.warning(f"Dropping non-numeric columns: {skipped}")
    rows = len(numeric)
    numeric = numeric.dropna()
    if len(numeric) < rows:
        logger.warning(f"Dropped {rows - len(numeric)} rows with missing values")

    discrete = discrete_columns(numeric, discrete_max_levels)
    numeric = numeric.drop(columns=discrete)
    constant = [c for c in numeric.columns if numeric[c].std() == 0]
    numeric = numeric.drop(columns=constant)
    correlated = correlated_columns(numeric, corr_threshold) if numeric.shape[1] > 1 else []
    numeric = numeric.drop(columns=correlated)
    logger.info(f"Preprocessing dropped discrete={discrete}, constant={constant}, correlated={correlated}")

    features = list(numeric.columns)
    if len(features) < 2:
        raise DatasetError(f"only {len(features)} usable column(s) left after filtering")
    d = len(features)
    if task == "joint":
        y_cols, x_cols = features[:d // 2], features[d // 2:]
    else:
        y_cols, x_cols = features[:-1], features[-1:]

    splits = split_indices(len(numeric), (0.8, 0.1), seed)
    return Dataset.build(
        numeric[x_cols].to_numpy(dtype=np.float64),
        numeric[y_cols].to_numpy(dtype=np.float64),
        splits,
        x_columns=x_cols,
        y_columns=y_cols,
        task=task,
        meta={"source": "uci", "dropped": {"discrete": discrete, "constant": constant, "correlated": correlated}},
    )


# --- storage ---------------------------------------------------------------------

def meta_path(csv_path: str | Path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.name + ".meta.json")


def save_dataset(ds: Dataset, csv_path: str | Path) -> Path:
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(np.hstack([ds.X, ds.Y]), columns=list(ds.x_columns) + list(ds.y_columns))
    frame.to_csv(csv_path, index=False, float_format="%.17g")
    sidecar = {
        "format_version": META_VERSION,
        "task": ds.task,
        "x_columns": list(ds.x_columns),
        "y_columns": list(ds.y_columns),
        "splits": {name: ds.splits[name].tolist() for name in SPLITS},
        "x_mean": ds.x_mean.tolist(),
        "x_std": ds.x_std.tolist(),
        "y_mean": ds.y_mean.tolist(),
        "y_std": ds.y_std.tolist(),
        "meta": ds.meta,
    }
    meta_path(csv_path).write_bytes(orjson.dumps(sidecar, option=orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY))
    logger.info(f"Wrote {ds.describe()} to {csv_path}")
    return csv_path


def load_dataset(csv_path: str | Path) -> Dataset:
    csv_path = Path(csv_path)
    sidecar_path = meta_path(csv_path)
    if not csv_path.exists():
        raise DatasetError(f"dataset file not found: {csv_path}")
    if not sidecar_path.exists():
        raise DatasetError(f"dataset sidecar not found: {sidecar_path}")
    try:
        sidecar = orjson.loads(sidecar_path.read_bytes())
    except orjson.JSONDecodeError as exc:
        raise DatasetError(f"malformed dataset sidecar {sidecar_path}: {exc}") from exc
    if sidecar.get("format_version") != META_VERSION:
        raise DatasetError(f"unsupported dataset sidecar version {sidecar.get('format_version')}")

    frame = pd.read_csv(csv_path)
    x_cols, y_cols = sidecar["x_columns"], sidecar["y_columns"]
    missing = [c for c in x_cols + y_cols if c not in frame.columns]
    if missing:
        raise DatasetError(f"columns {missing} listed in the sidecar are missing from {csv_path}")
    try:
        return Dataset(
            X=frame[x_cols].to_numpy(dtype=np.float64),
            Y=frame[y_cols].to_numpy(dtype=np.float64),
            splits={name: np.asarray(sidecar["splits"][name], dtype=int) for name in SPLITS},
            x_mean=np.asarray(sidecar["x_mean"], dtype=np.float64),
            x_std=np.asarray(sidecar["x_std"], dtype=np.float64),
            y_mean=np.asarray(sidecar["y_mean"], dtype=np.float64),
            y_std=np.asarray(sidecar["y_std"], dtype=np.float64),
            x_columns=list(x_cols),
            y_columns=list(y_cols),
            task=sidecar.get("task", "conditional"),
            meta=sidecar.get("meta", {}),
        )
    except KeyError as exc:
        raise DatasetError(f"dataset sidecar {sidecar_path} lacks {exc}") from exc
