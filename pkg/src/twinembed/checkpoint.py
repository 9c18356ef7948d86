"""Checkpoint container: magic, JSON header, then raw little-endian float64 arrays.

Layout::

    b"TWEMBCK1" | uint64 LE header length | header JSON (UTF-8) | arrays...

The header lists every array's name and shape in storage order, so the file
is self-describing. JSON is written with sorted keys and no timestamps, which
makes save -> load -> save byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .cross import TwinModel, cael_positions
from .data import Vocab
from .encoder import EncoderConfig, EncoderWeights
from .errors import ArtifactIOError, DataError

MAGIC = b"TWEMBCK1"
FORMAT_VERSION = 1


@dataclass
class CheckpointBundle:
    model: TwinModel | EncoderWeights
    vocab: Vocab
    best_spearman: float | None = None
    step: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "twin" if isinstance(self.model, TwinModel) else "single"

    @property
    def config(self) -> EncoderConfig:
        return self.model.config

    def named_arrays(self) -> dict[str, np.ndarray]:
        if isinstance(self.model, TwinModel):
            return {k: v.data for k, v in self.model.params().items()}
        return self.model.arrays()


def to_bytes(bundle: CheckpointBundle) -> bytes:
    arrays = bundle.named_arrays()
    header = {
        "format": FORMAT_VERSION,
        "kind": bundle.kind,
        "config": bundle.config.to_dict(),
        "cael_k": bundle.model.placement.k if bundle.kind == "twin" else None,
        "vocab": list(bundle.vocab.tokens),
        "best_spearman": bundle.best_spearman,
        "step": bundle.step,
        "meta": bundle.meta,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
    return MAGIC + struct.pack("<Q", len(blob)) + blob + body


def from_bytes(raw: bytes) -> CheckpointBundle:
    if raw[:8] != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    if header.get("format") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format {header.get('format')}")
    offset = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        buf = raw[offset : offset + 8 * count]
        if len(buf) != 8 * count:
            raise DataError(f"checkpoint truncated at array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        offset += 8 * count
    cfg = EncoderConfig(**header["config"])

    def tower(prefix: str) -> EncoderWeights:
        n = len(prefix)
        return EncoderWeights(
            cfg, {k[n:]: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith(prefix)}
        )

    if header["kind"] == "twin":
        model = TwinModel(tower("I."), tower("II."), cael_positions(cfg.n_layers, header["cael_k"]))
    else:
        model = tower("")
    return CheckpointBundle(model, Vocab(tuple(header["vocab"])), header["best_spearman"], header["step"], header["meta"])


def save(bundle: CheckpointBundle, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(to_bytes(bundle))
    except OSError as exc:
        raise ArtifactIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load(path) -> CheckpointBundle:
    path = Path(path)
    if path.is_dir():
        path = path / "model.ckpt"
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(raw)
