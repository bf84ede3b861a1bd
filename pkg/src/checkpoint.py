"""
Checkpoint files: trained weights plus the config that produced them.

Weights are stored as hexadecimal float strings (``float.hex``) so a
save/load round trip is bit-exact. The file is a single JSON object:

    {"format_version": 1, "kind": "pcp" | "pcp-joint" | "cot" | "cot-joint",
     "config": {...}, "meta": {...},
     "models": {role: {"class": ..., "dims": {...},
                       "arrays": {key: {"shape": [r, c], "hex": [...]}}}}}
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

import numpy as np
import orjson

from .config import SampleConfig
from .cot_flow import EmbedParams, FlowModel, PhiParams
from .errors import CheckpointError, FormatVersionError, ModelKindMismatchError
from .pcp_map import PcpModel
from .potentials import PARAM_CLASSES, ParamSet

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
KINDS = ("pcp", "pcp-joint", "cot", "cot-joint")
FAMILIES = {"pcp": ("pcp", "pcp-joint"), "cot": ("cot", "cot-joint")}

CLASSES = {**PARAM_CLASSES, PhiParams.kind: PhiParams, EmbedParams.kind: EmbedParams}

Model = Union[PcpModel, FlowModel]


def _encode_array(value: np.ndarray) -> Dict[str, Any]:
    value = np.atleast_2d(np.asarray(value, dtype=np.float64))
    return {"shape": list(value.shape), "hex": [float(v).hex() for v in value.ravel()]}


def _decode_array(entry: Dict[str, Any]) -> np.ndarray:
    shape = tuple(int(s) for s in entry["shape"])
    flat = np.array([float.fromhex(h) for h in entry["hex"]], dtype=np.float64)
    if flat.size != int(np.prod(shape)):
        raise CheckpointError(f"array holds {flat.size} values but declares shape {shape}")
    return flat.reshape(shape)


def _encode_params(params: ParamSet) -> Dict[str, Any]:
    return {
        "class": params.kind,
        "dims": dict(params.dims),
        "arrays": {k: _encode_array(v) for k, v in params.numpy().items()},
    }


def _decode_params(entry: Dict[str, Any]) -> ParamSet:
    cls = CLASSES.get(entry["class"])
    if cls is None:
        raise CheckpointError(f"unknown parameter class '{entry['class']}'")
    return cls(dims=dict(entry["dims"]), arrays={k: _decode_array(v) for k, v in entry["arrays"].items()})


def encode(model: Model, config: Optional[Dict[str, Any]] = None,
           meta: Optional[Dict[str, Any]] = None) -> bytes:
    meta = dict(meta or {})
    if isinstance(model, FlowModel):
        meta.update(nt=model.nt, nt_eval=model.nt_eval, alpha1=model.alpha1, alpha2=model.alpha2)
    elif isinstance(model, PcpModel):
        meta["sampling"] = model.sampling.model_dump()
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": model.checkpoint_kind,
        "config": config or {},
        "meta": meta,
        "models": {role: _encode_params(p) for role, p in model.models().items()},
    }
    return orjson.dumps(payload, option=orjson.OPT_SERIALIZE_NUMPY)


def decode(raw: bytes, expected: Optional[Iterable[str]] = None) -> Tuple[Model, Dict[str, Any], Dict[str, Any]]:
    """
    Rebuild a model from checkpoint bytes.

    Args:
        raw: file contents
        expected: accepted kinds, or a family name ("pcp", "cot")

    Returns:
        (model, config, meta)
    """
    try:
        data = orjson.loads(raw)
    except orjson.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if not isinstance(data, dict):
        raise CheckpointError("malformed checkpoint: expected a JSON object")
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"checkpoint format_version {version!r} is not supported "
                                 f"(expected {FORMAT_VERSION})")
    kind = data.get("kind")
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    if expected is not None:
        accepted = FAMILIES.get(expected, (expected,)) if isinstance(expected, str) else tuple(expected)
        if kind not in accepted:
            raise ModelKindMismatchError(f"checkpoint holds a '{kind}' model, expected one of {accepted}")

    try:
        models = {role: _decode_params(entry) for role, entry in data["models"].items()}
        config = data.get("config") or {}
        meta = data.get("meta") or {}
        if kind.startswith("pcp"):
            model: Model = PcpModel(pot_x=models["x"], pot_y=models.get("y"),
                                    sampling=SampleConfig(**meta.get("sampling", {})))
        else:
            model = FlowModel(phi_x=models["x"], phi_y=models.get("y"), nt=int(meta["nt"]),
                              nt_eval=meta.get("nt_eval"), alpha1=float(meta["alpha1"]),
                              alpha2=float(meta["alpha2"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc!r}") from exc
    if model.joint != kind.endswith("joint"):
        raise CheckpointError(f"checkpoint kind '{kind}' does not match its stored models {sorted(models)}")
    return model, config, meta


def save_checkpoint(model: Model, path: str | Path, config: Optional[Dict[str, Any]] = None,
                    meta: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(model, config, meta))
    logger.info(f"Checkpoint written: {path}")
    return path


def load_checkpoint(path: str | Path, expected: Optional[Iterable[str]] = None
                    ) -> Tuple[Model, Dict[str, Any], Dict[str, Any]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    return decode(raw, expected)
