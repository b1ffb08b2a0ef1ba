"""Parameter checkpoint persistence.

Checkpoints are JSON documents holding every named parameter of a
ParamStore with its Adam moments and step count:
- Arrays are little-endian float64 bytes, base64 encoded, with their shape
- Parameter names are namespaced: vae.encoder.*, vae.decoder.*, policy.*
- A meta block records the model settings needed to rebuild the networks

Keys are written sorted, so saving the same store twice yields identical
files.
"""

from __future__ import annotations

import base64
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

from .const import CHECKPOINT_FORMAT, CHECKPOINT_VERSION
from .diffcore import ParamStore
from .exceptions import DataError
from .types import ArrayDict, CheckpointDocument, ParameterDict

_LOGGER = logging.getLogger(__name__)

NAMESPACE_ENCODER = "vae.encoder."
NAMESPACE_DECODER = "vae.decoder."
NAMESPACE_POLICY = "policy."


class CheckpointError(DataError):
    """Checkpoint file is missing, malformed or incompatible."""


def encode_array(array: np.ndarray) -> ArrayDict:
    """Serialize an array as shape plus base64 little-endian float64 bytes."""
    data = np.ascontiguousarray(array, dtype="<f8")
    return {"shape": list(data.shape), "data": base64.b64encode(data.tobytes()).decode("ascii")}


def decode_array(payload: ArrayDict) -> np.ndarray:
    """Inverse of encode_array.

    Raises:
        CheckpointError: If the byte count does not match the shape
    """
    try:
        shape = tuple(int(size) for size in payload["shape"])
        raw = base64.b64decode(payload["data"], validate=True)
    except (KeyError, TypeError, ValueError) as err:
        raise CheckpointError(f"malformed array: {err}") from err
    expected = int(np.prod(shape, dtype=np.int64)) * 8
    if len(raw) != expected:
        raise CheckpointError(f"array of shape {shape} needs {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


class CheckpointStore:
    """Reads and writes parameter checkpoints.

    Attributes:
        path: Checkpoint file
        meta: Model settings stored with the parameters
    """

    def __init__(self, path: str | Path) -> None:
        """Initialize the store.

        Args:
            path: Checkpoint file
        """
        self.path = Path(path)
        self.meta: dict[str, Any] = {}

    def save(self, params: ParamStore, meta: dict[str, Any] | None = None) -> None:
        """Write all parameters with their optimizer state.

        Args:
            params: Parameters to save
            meta: Model settings to record
        """
        if meta is not None:
            self.meta = dict(meta)
        entries: dict[str, ParameterDict] = {}
        for name in params.names():
            value, first, second, step = params.state(name)
            entries[name] = {
                "value": encode_array(value),
                "first_moment": encode_array(first),
                "second_moment": encode_array(second),
                "step": int(step),
            }
        document: CheckpointDocument = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "params": entries,
            "meta": self.meta,
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        tmp.write_text(json.dumps(document, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        tmp.replace(self.path)
        _LOGGER.info("Saved checkpoint %s: %d parameters", self.path, len(entries))

    def load(self, params: ParamStore | None = None) -> ParamStore:
        """Read a checkpoint.

        Args:
            params: Existing store to fill; its parameters must match the
                checkpoint's shapes. A new store is created if None.

        Returns:
            The filled store

        Raises:
            CheckpointError: If the file is unreadable or incompatible
        """
        try:
            document = json.loads(self.path.read_text(encoding="utf-8"))
        except OSError as err:
            raise CheckpointError(f"{self.path}: cannot read checkpoint: {err}") from err
        except json.JSONDecodeError as err:
            raise CheckpointError(f"{self.path}:{err.lineno}:{err.colno}: {err.msg}") from err

        if not isinstance(document, dict) or document.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{self.path}: not a {CHECKPOINT_FORMAT} checkpoint")
        if document.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{self.path}: unsupported checkpoint version {document.get('version')}")

        store = params if params is not None else ParamStore()
        raw_params = document.get("params", {})
        if params is not None:
            missing = sorted(set(params.names()) - set(raw_params))
            if missing:
                raise CheckpointError(f"{self.path}: missing parameters {', '.join(missing[:5])}")
        for name in sorted(raw_params):
            entry = raw_params[name]
            try:
                value = decode_array(entry["value"])
                first = decode_array(entry["first_moment"])
                second = decode_array(entry["second_moment"])
                step = int(entry["step"])
            except (KeyError, TypeError, ValueError) as err:
                raise CheckpointError(f"{self.path}: params.{name}: {err}") from err
            try:
                store.set(name, value, first, second, step)
            except ValueError as err:
                raise CheckpointError(f"{self.path}: params.{name}: {err}") from err

        self.meta = dict(document.get("meta", {}))
        _LOGGER.info("Loaded checkpoint %s: %d parameters", self.path, len(raw_params))
        return store
