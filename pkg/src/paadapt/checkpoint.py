"""Checkpoint container: UTF-8 header of (name, shape, offset) + raw float32.

Layout:
    PAADAPT1\n
    <n_params>\n
    <name>\t<d0,d1,...>\t<byte offset into payload>\n   (one line per param)
    \n
    little-endian float32 payload
"""

from __future__ import annotations

import numpy as np

MAGIC = b"PAADAPT1"


class CheckpointError(ValueError):
    pass


def save(params, path):
    """Write a name -> Tensor (or ndarray) mapping."""
    names = list(params)
    arrays = [np.ascontiguousarray(getattr(params[n], "data", params[n]), dtype="<f4") for n in names]
    header_lines = [MAGIC + b"\n", f"{len(names)}\n".encode()]
    offset = 0
    for name, arr in zip(names, arrays):
        shape = ",".join(str(d) for d in arr.shape) if arr.ndim else ""
        header_lines.append(f"{name}\t{shape}\t{offset}\n".encode())
        offset += arr.nbytes
    header_lines.append(b"\n")
    with open(path, "wb") as fh:
        fh.writelines(header_lines)
        for arr in arrays:
            fh.write(arr.tobytes())


def load(path):
    """Read a checkpoint back as a name -> float32 ndarray dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.index(b"\n")
    if blob[:nl] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:nl]!r}, expected {MAGIC.decode()}")
    rest = blob[nl + 1 :]
    nl = rest.index(b"\n")
    n = int(rest[:nl])
    rest = rest[nl + 1 :]
    entries = []
    for _ in range(n):
        nl = rest.index(b"\n")
        name, shape_s, offset_s = rest[:nl].decode("utf-8").split("\t")
        shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
        entries.append((name, shape, int(offset_s)))
        rest = rest[nl + 1 :]
    if not rest.startswith(b"\n"):
        raise CheckpointError(f"{path}: malformed header terminator")
    payload = rest[1:]
    out = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        out[name] = arr.reshape(shape).copy()
    return out


def load_into(model, path):
    """Assign checkpoint arrays onto a model's parameters by name."""
    stored = load(path)
    params = model.parameters()
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise CheckpointError(
            f"{path}: parameter names do not match model (missing {missing[:3]}, extra {extra[:3]})"
        )
    for name, p in params.items():
        if stored[name].shape != p.data.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: checkpoint {stored[name].shape}, model {p.data.shape}"
            )
        p.data = stored[name].astype(np.float32)
