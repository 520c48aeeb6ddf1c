"""Binary checkpoints: ``b"LISA"``, a version byte, a length-prefixed JSON
header, then the flat parameter vector as little-endian float64."""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .lisa import LisaModel, parameter_layout
from .modem import make_constellation

MAGIC = b"LISA"
VERSION = 1


class CheckpointError(ValueError):
    pass


def model_metadata(model: LisaModel) -> dict:
    meta = {
        "format_version": VERSION,
        "variant": model.variant,
        "n_t": model.n_t,
        "d_h": model.d_h,
        "n_blocks": model.n_blocks,
        "constellation": model.constellation,
        "dnn_hidden": list(model.dnn_hidden),
        "n_params": model.n_params,
    }
    meta.update({k: v for k, v in model.meta.items() if k not in meta})
    return meta


def save_checkpoint(model: LisaModel, path) -> None:
    header = json.dumps(model_metadata(model), sort_keys=True, separators=(",", ":")).encode()
    payload = model.theta.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BI", VERSION, len(header)))
        fh.write(header)
        fh.write(payload)


def read_checkpoint_metadata(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if len(data) < 9 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a LISA checkpoint (bad magic)")
    version, hlen = struct.unpack("<BI", data[4:9])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (this build reads {VERSION})")
    if len(data) < 9 + hlen:
        raise CheckpointError(f"{path}: truncated metadata header")
    try:
        meta = json.loads(data[9:9 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata: {exc}") from exc
    return meta, data[9 + hlen:]


def load_checkpoint(path) -> LisaModel:
    meta, payload = read_checkpoint_metadata(path)
    try:
        variant = meta["variant"]
        n_t, d_h, n_blocks = int(meta["n_t"]), int(meta["d_h"]), int(meta["n_blocks"])
        const = make_constellation(meta["constellation"])
        hidden = tuple(meta.get("dnn_hidden", ()))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: incomplete metadata: {exc}") from exc
    layout = parameter_layout(variant, n_t, d_h, const.M, hidden)
    expected = sum(math.prod(shape) for step in layout for _, shape in step)
    if len(payload) != 8 * expected:
        raise CheckpointError(
            f"{path}: payload length {len(payload)} bytes does not match the "
            f"{expected} parameters implied by the metadata ({8 * expected} bytes)"
        )
    theta = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    extra = {k: v for k, v in meta.items()
             if k not in ("format_version", "variant", "n_t", "d_h", "n_blocks",
                          "constellation", "dnn_hidden", "n_params")}
    return LisaModel(variant, n_t, d_h, n_blocks, const.name, theta, hidden, extra)
