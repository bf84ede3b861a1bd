"""
RunRecord: what one training run did, serializable to JSON.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import orjson

from .errors import CotlabError

STATUS_OK = "ok"
STATUS_DIVERGED = "diverged"
STATUS_FAILED = "failed"


def _finite_or_none(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return float(value)


@dataclass
class RunRecord:
    run_id: str
    model: str
    config: Dict[str, Any]
    seed: int
    train_losses: List[Tuple[int, Optional[float]]] = field(default_factory=list)
    valid_losses: List[Tuple[int, Optional[float]]] = field(default_factory=list)
    metrics: Dict[str, Optional[float]] = field(default_factory=dict)
    checkpoint: Optional[str] = None
    wall_clock: float = 0.0
    status: str = STATUS_OK
    flags: Dict[str, Any] = field(default_factory=dict)

    def log_train(self, step: int, value: float) -> None:
        self.train_losses.append((int(step), _finite_or_none(value)))

    def log_valid(self, step: int, value: float) -> None:
        self.valid_losses.append((int(step), _finite_or_none(value)))

    def set_metric(self, name: str, value: Optional[float]) -> None:
        self.metrics[name] = _finite_or_none(value)

    @property
    def best_valid(self) -> float:
        values = [v for _, v in self.valid_losses if v is not None]
        return min(values) if values else math.inf

    @property
    def final_valid(self) -> float:
        """Last validation value; inf when none was logged or it was non-finite."""
        if not self.valid_losses or self.valid_losses[-1][1] is None:
            return math.inf
        return float(self.valid_losses[-1][1])

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["train_losses"] = [list(p) for p in self.train_losses]
        data["valid_losses"] = [list(p) for p in self.valid_losses]
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunRecord":
        data = dict(data)
        data["train_losses"] = [tuple(p) for p in data.get("train_losses", [])]
        data["valid_losses"] = [tuple(p) for p in data.get("valid_losses", [])]
        return cls(**data)

    def dumps(self) -> bytes:
        return orjson.dumps(self.to_dict(), option=orjson.OPT_INDENT_2)

    @classmethod
    def loads(cls, raw: bytes) -> "RunRecord":
        try:
            return cls.from_dict(orjson.loads(raw))
        except (ValueError, TypeError) as exc:
            raise CotlabError(f"malformed run record: {exc}") from exc

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.dumps())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        return cls.loads(Path(path).read_bytes())
