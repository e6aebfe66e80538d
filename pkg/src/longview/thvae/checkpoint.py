"""Single-file checkpoints.

Layout: the 6-byte magic ``THVAE1``, a little-endian uint32 header length,
a UTF-8 JSON header (config, vocabulary, tensor table), then every tensor as
row-major little-endian float32 in table order.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

MAGIC = b"THVAE1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path: str | Path) -> None:
    path = Path(path)
    state = model.state_dict()
    table, blobs = [], []
    for name, t in state.items():
        arr = t.detach().cpu().numpy()
        table.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = {
        "config": model.config.to_dict(),
        "vocabulary": model.vocabulary.tokens,
        "weight_source": model.weight_source.value,
        "training_step_count": model.training_step_count,
        "tensors": table,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC + struct.pack("<I", len(raw)) + raw)
            for b in blobs:
                fh.write(b)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path):
    from .config import ThVaeConfig
    from .model import ThVae, WeightSource
    from .vocab import Vocabulary

    data = Path(path).read_bytes()
    if data[:6] != MAGIC:
        raise CheckpointError(f"{path}: not a THVAE1 checkpoint")
    (n,) = struct.unpack("<I", data[6:10])
    header = json.loads(data[10:10 + n])
    config = ThVaeConfig.from_dict(header["config"])
    vocab = Vocabulary(header["vocabulary"], config.embedding_dim)
    model = ThVae(config, vocab)
    model.weight_source = WeightSource(header["weight_source"])
    model.training_step_count = int(header["training_step_count"])
    offset = 10 + n
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        offset += 4 * count
        state[entry["name"]] = torch.from_numpy(arr.astype(entry["dtype"]))
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    model.load_state_dict(state)
    model.eval()
    return model
