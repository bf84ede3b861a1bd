"""
Hyperparameter search spaces and random tuple sampling.

Named presets cover the regimes used in practice; the active preset can be
forced through the COTLAB_SEARCH_PRESET environment variable.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import Field, field_validator, model_validator

from .config import FlowConfig, PcpTrainConfig, _Config, build
from .errors import ConfigError
from .seeding import generator
from .settings import settings

logger = logging.getLogger(__name__)


class SearchSpace(_Config):
    """Candidate values per hyperparameter; α's are drawn log-uniformly."""

    batch_sizes: List[int] = Field(default_factory=lambda: [32, 64, 128, 256])
    learning_rates: List[float] = Field(default_factory=lambda: [0.05, 0.01, 1e-3, 1e-4])
    widths: List[int] = Field(default_factory=lambda: [32, 64, 128, 256, 512])
    depths: List[int] = Field(default_factory=lambda: [2, 3, 4, 5, 6])
    nts: List[int] = Field(default_factory=lambda: [8, 16])
    log_alpha: Tuple[float, float] = Field((-1.0, 3.0), description="Natural-log range of α₁ and α₂")
    embed_widths: List[int] = Field(default_factory=list, description="Empty disables the context embedding")
    embed_outs: List[int] = Field(default_factory=list)
    tie_context: bool = Field(False, description="Force the context width to equal the feature width")

    @field_validator("batch_sizes", "learning_rates", "widths", "depths", "nts")
    @classmethod
    def _non_empty(cls, values):
        if not values:
            raise ValueError("candidate list must not be empty")
        if any(v <= 0 for v in values):
            raise ValueError(f"candidates must be positive, got {values}")
        return values

    @model_validator(mode="after")
    def _ranges(self) -> "SearchSpace":
        lo, hi = self.log_alpha
        if not lo < hi:
            raise ValueError(f"log_alpha range must be increasing, got {self.log_alpha}")
        if bool(self.embed_widths) != bool(self.embed_outs):
            raise ValueError("embed_widths and embed_outs must be given together")
        if min(self.depths) < 2:
            raise ValueError("network depth must be at least 2")
        return self


class SearchPreset(Enum):
    """Named search regimes."""

    # wide space for new problems
    DEFAULT = "default"

    # same, with the large-penalty α regime
    HIGH_ALPHA = "high_alpha"

    # small tabular datasets: small batches, large learning rates
    TABULAR = "tabular"

    # simulation-based inference with summary statistics
    LFI = "lfi"

    # tiny networks for CPU smoke runs
    DESK = "desk"


@dataclass
class PresetSpec:
    pcp: SearchSpace
    cot: SearchSpace
    description: str

    def space(self, model: str) -> SearchSpace:
        if model not in ("pcp", "cot"):
            raise ConfigError(f"unknown model '{model}'")
        return self.pcp if model == "pcp" else self.cot


_POW2 = lambda lo, hi: [2 ** k for k in range(lo, hi + 1)]  # noqa: E731

PRESETS: Dict[SearchPreset, PresetSpec] = {
    SearchPreset.DEFAULT: PresetSpec(
        pcp=SearchSpace(batch_sizes=_POW2(5, 8), widths=_POW2(5, 9), depths=[2, 3, 4, 5, 6]),
        cot=SearchSpace(batch_sizes=_POW2(5, 10), widths=_POW2(5, 10), depths=[2], nts=[8, 16],
                        log_alpha=(-1.0, 3.0), embed_widths=_POW2(5, 7), embed_outs=_POW2(5, 7)),
        description="General-purpose spaces, α from exp(U(-1, 3))",
    ),
    SearchPreset.HIGH_ALPHA: PresetSpec(
        pcp=SearchSpace(batch_sizes=_POW2(5, 8), widths=_POW2(5, 9)),
        cot=SearchSpace(batch_sizes=_POW2(5, 10), widths=_POW2(5, 10), depths=[2], log_alpha=(2.0, 5.0),
                        embed_widths=_POW2(5, 7), embed_outs=_POW2(5, 7)),
        description="General-purpose spaces, α from exp(U(2, 5))",
    ),
    SearchPreset.TABULAR: PresetSpec(
        pcp=SearchSpace(batch_sizes=[32, 64], learning_rates=[0.01, 0.005, 0.001], widths=_POW2(5, 9)),
        cot=SearchSpace(batch_sizes=[32, 64], learning_rates=[0.01, 0.005, 0.001], widths=_POW2(5, 9),
                        depths=[2]),
        description="UCI-style tables",
    ),
    SearchPreset.LFI: PresetSpec(
        pcp=SearchSpace(batch_sizes=[64, 128, 256], learning_rates=[0.01, 0.005, 0.001], widths=_POW2(5, 9),
                        tie_context=True),
        cot=SearchSpace(batch_sizes=[32, 64, 128, 256], learning_rates=[0.01, 0.005, 0.001],
                        widths=_POW2(5, 9), depths=[2], embed_widths=_POW2(5, 7), embed_outs=_POW2(5, 7)),
        description="Likelihood-free inference, context width tied to feature width",
    ),
    SearchPreset.DESK: PresetSpec(
        pcp=SearchSpace(batch_sizes=[32, 64], learning_rates=[0.01, 0.005], widths=[8, 16], depths=[2, 3]),
        cot=SearchSpace(batch_sizes=[32, 64], learning_rates=[0.01, 0.005], widths=[8, 16], depths=[2],
                        nts=[4, 8], log_alpha=(-1.0, 1.0)),
        description="Tiny networks for quick CPU runs",
    ),
}


class SearchPresetManager:
    """Resolves the active search preset with an environment override."""

    def __init__(self):
        self._preset: Optional[SearchPreset] = None

    def get_preset(self, requested: Optional[str] = None) -> SearchPreset:
        """
        Priority: set_preset(), then COTLAB_SEARCH_PRESET, then ``requested``,
        then DEFAULT.
        """
        if self._preset is not None:
            return self._preset
        env = os.getenv("COTLAB_SEARCH_PRESET") or settings.search_preset
        for name in (env, requested):
            if not name:
                continue
            try:
                return SearchPreset[name.upper()]
            except KeyError:
                raise ConfigError(f"unknown search preset '{name}', expected one of "
                                  f"{[p.value for p in SearchPreset]}") from None
        return SearchPreset.DEFAULT

    def get_space(self, model: str, requested: Optional[str] = None) -> SearchSpace:
        preset = self.get_preset(requested)
        logger.debug(f"Search preset: {preset.value} ({PRESETS[preset].description})")
        return PRESETS[preset].space(model)

    def set_preset(self, preset: SearchPreset) -> None:
        self._preset = preset

    def reset(self) -> None:
        self._preset = None


preset_manager = SearchPresetManager()


# --- sampling ---------------------------------------------------------------------

def context_candidates(width: int, m: int) -> List[int]:
    """{w/2^i : w/2^i > m, i = 0, 1, …} ∪ {m}."""
    out = []
    u = width
    while u > m:
        out.append(u)
        if u % 2:
            break
        u //= 2
    if m not in out:
        out.append(m)
    return out


def _pick(rng: np.random.Generator, values: List[Any]) -> Any:
    return values[int(rng.integers(len(values)))]


def sample_space(space: SearchSpace, count: int, seed: int, model: str = "pcp", m: int = 1) -> List[Dict[str, Any]]:
    """
    ``count`` random tuples from ``space``; deterministic for a fixed seed.

    PCP tuples hold batch_size, learning_rate, width, depth, context_width;
    COT tuples hold batch_size, learning_rate, width, nt, alpha1, alpha2 and,
    when the space has them, embed_width and embed_out.
    """
    if count < 0:
        raise ConfigError(f"count must be non-negative, got {count}")
    if model not in ("pcp", "cot"):
        raise ConfigError(f"unknown model '{model}'")
    rng = generator(seed, "search", model)
    tuples = []
    for _ in range(count):
        item: Dict[str, Any] = {
            "batch_size": int(_pick(rng, space.batch_sizes)),
            "learning_rate": float(_pick(rng, space.learning_rates)),
            "width": int(_pick(rng, space.widths)),
        }
        if model == "pcp":
            item["depth"] = int(_pick(rng, space.depths))
            item["context_width"] = item["width"] if space.tie_context else int(
                _pick(rng, context_candidates(item["width"], m)))
        else:
            item["nt"] = int(_pick(rng, space.nts))
            lo, hi = space.log_alpha
            item["alpha1"] = float(np.exp(rng.uniform(lo, hi)))
            item["alpha2"] = float(np.exp(rng.uniform(lo, hi)))
            if space.embed_widths:
                item["embed_width"] = int(_pick(rng, space.embed_widths))
                item["embed_out"] = int(_pick(rng, space.embed_outs))
        tuples.append(item)
    return tuples


def train_config(model: str, params: Dict[str, Any], **overrides: Any):
    """Training config for one sampled tuple."""
    cls = PcpTrainConfig if model == "pcp" else FlowConfig
    return build(cls, {**params, **overrides})
