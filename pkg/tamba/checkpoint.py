"""Flat parameter archive.

Layout::

    TAMBA-CKPT v1
    CONFIG {"d": 32, ...}
    MANIFEST <count>
    <name> <comma separated shape or -> <byte offset>
    ...
    END
    <little-endian float64 payload>
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from tamba.errors import CheckpointError

logger = logging.getLogger(__name__)

HEADER = "TAMBA-CKPT v1"
PAYLOAD_DTYPE = np.dtype("<f8")


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    shape: Tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass
class Checkpoint:
    entries: List[ManifestEntry]
    config: Optional[Dict[str, Any]] = None
    parameters: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_parameters(self) -> int:
        return sum(entry.size for entry in self.entries)


def _format_shape(shape: Tuple[int, ...]) -> str:
    return ",".join(str(extent) for extent in shape) if shape else "-"


def _parse_shape(text: str) -> Tuple[int, ...]:
    if text == "-":
        return ()
    return tuple(int(extent) for extent in text.split(","))


def save_checkpoint(
    path: Union[str, Path],
    parameters: Mapping[str, np.ndarray],
    config: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Write ``parameters`` in insertion order; identical inputs give identical bytes."""
    path = Path(path)
    lines = [HEADER, f"CONFIG {json.dumps(dict(config or {}), sort_keys=True)}"]
    lines.append(f"MANIFEST {len(parameters)}")
    offset = 0
    payload = []
    for name, value in parameters.items():
        if not name or any(ch.isspace() for ch in name):
            raise CheckpointError(f"invalid parameter name {name!r}")
        array = np.require(value, dtype=PAYLOAD_DTYPE, requirements="C")
        lines.append(f"{name} {_format_shape(array.shape)} {offset}")
        payload.append(array.tobytes(order="C"))
        offset += array.nbytes
    lines.append("END")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(("\n".join(lines) + "\n").encode("ascii"))
        for chunk in payload:
            handle.write(chunk)
    logger.debug("Saved %d parameter tensors to %s", len(parameters), path)
    return path


def _read_header(handle: BinaryIO, path: Path) -> Checkpoint:
    def next_line() -> str:
        raw = handle.readline()
        if not raw.endswith(b"\n"):
            raise CheckpointError(f"{path} ends inside the header")
        return raw.decode("ascii").rstrip("\n")

    try:
        if next_line() != HEADER:
            raise CheckpointError(f"{path} is not a {HEADER} file")
        config_line = next_line()
        if not config_line.startswith("CONFIG "):
            raise CheckpointError(f"{path} is missing its CONFIG line")
        config = json.loads(config_line[len("CONFIG ") :]) or None
        manifest_line = next_line()
        if not manifest_line.startswith("MANIFEST "):
            raise CheckpointError(f"{path} is missing its MANIFEST line")
        entries = []
        for _ in range(int(manifest_line.split()[1])):
            name, shape, offset = next_line().split(" ")
            entries.append(ManifestEntry(name, _parse_shape(shape), int(offset)))
        if next_line() != "END":
            raise CheckpointError(f"{path} manifest is not terminated by END")
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path} has a malformed header: {exc}") from exc
    return Checkpoint(entries=entries, config=config)


def read_manifest(path: Union[str, Path]) -> Checkpoint:
    """Read names, shapes and offsets without loading the payload."""
    path = Path(path)
    try:
        with path.open("rb") as handle:
            return _read_header(handle, path)
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint.

    Raises
    ------
    CheckpointError
        If the file is missing, the header is malformed or the payload is truncated.
    """
    path = Path(path)
    try:
        with path.open("rb") as handle:
            checkpoint = _read_header(handle, path)
            payload = handle.read()
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    for entry in checkpoint.entries:
        end = entry.offset + entry.size * PAYLOAD_DTYPE.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path} payload is truncated inside {entry.name}")
        values = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=entry.size, offset=entry.offset)
        checkpoint.parameters[entry.name] = values.astype(np.float64).reshape(entry.shape)
    return checkpoint
