"""Binary model files.

Layout (all little-endian)::

    b"PSTL1"
    uint32  descriptor length L
    L bytes UTF-8 JSON: {"format": 1, "network": NetworkConfig, "stats": {...} | null,
                         "params": [[name, shape], ...]}
    float64 values of every parameter, concatenated in the order of "params"
    (which is the module's state_dict order), each tensor in C order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .network import Network, NetworkConfig
from .sequences import NormStats

MAGIC = b"PSTL1"


class ModelFormatError(ValueError):
    pass


def save_model(net: Network, path) -> None:
    state = net.state_dict()
    desc = {
        "format": 1,
        "network": net.config.to_dict(),
        "stats": net.stats.to_dict() if net.stats is not None else None,
        "params": [[name, list(t.shape)] for name, t in state.items()],
    }
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    values = [t.detach().cpu().double().numpy().astype("<f8").ravel() for t in state.values()]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.concatenate(values).tobytes() if values else b"")


def load_model(path, dtype=torch.float64) -> Network:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic")
    off = len(MAGIC)
    if len(data) < off + 4:
        raise ModelFormatError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        desc = json.loads(data[off:off + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: unreadable descriptor") from exc
    off += n
    if desc.get("format") != 1:
        raise ModelFormatError(f"{path}: unsupported format {desc.get('format')}")
    net = Network(NetworkConfig.from_dict(desc["network"])).to(dtype)
    if desc.get("stats") is not None:
        net.stats = NormStats(**desc["stats"])
    flat = np.frombuffer(data, dtype="<f8", offset=off)
    state = {}
    pos = 0
    for name, shape in desc["params"]:
        size = int(np.prod(shape))
        if pos + size > flat.size:
            raise ModelFormatError(f"{path}: parameter data truncated at {name}")
        state[name] = torch.as_tensor(flat[pos:pos + size].reshape(shape).copy(), dtype=dtype)
        pos += size
    if pos != flat.size:
        raise ModelFormatError(f"{path}: {flat.size - pos} trailing values")
    net.load_state_dict(state)
    return net
