"""Named-tensor container: raw little-endian payload plus a plain-text manifest.

``save_tensors(stem, tensors)`` writes ``stem.bin`` and ``stem.manifest``.
Each manifest line reads::

    <name> <dtype> <shape> <offset> <nbytes> <sha256>

with the shape written as ``AxBxC`` (``scalar`` for 0-d). Tensors are stored
in insertion order at 64-byte aligned offsets.
"""

import hashlib
from pathlib import Path

import numpy as np

MAGIC = "# mdss-tensors 1"
ALIGN = 64


class CheckpointError(Exception):
    pass


def _paths(stem):
    stem = Path(stem)
    return stem.with_name(stem.name + ".bin"), stem.with_name(stem.name + ".manifest")


def save_tensors(stem, tensors) -> int:
    """Write tensors; returns the payload size in bytes."""
    bin_path, man_path = _paths(stem)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [MAGIC]
    offset = 0
    with open(bin_path, "wb") as f:
        for name, arr in tensors.items():
            if any(c.isspace() for c in name):
                raise CheckpointError(f"tensor name {name!r} contains whitespace")
            a = np.ascontiguousarray(arr)
            a = a.astype(a.dtype.newbyteorder("<"), copy=False)
            pad = (-offset) % ALIGN
            f.write(b"\0" * pad)
            offset += pad
            raw = a.tobytes()
            f.write(raw)
            shape = "x".join(map(str, a.shape)) if a.ndim else "scalar"
            digest = hashlib.sha256(raw).hexdigest()
            lines.append(f"{name} {a.dtype.str} {shape} {offset} {len(raw)} {digest}")
            offset += len(raw)
    man_path.write_text("\n".join(lines) + "\n")
    return offset


def read_manifest(stem):
    _, man_path = _paths(stem)
    try:
        text = man_path.read_text().splitlines()
    except OSError as exc:
        raise CheckpointError(f"cannot read manifest {man_path}: {exc}") from exc
    if not text or text[0] != MAGIC:
        raise CheckpointError(f"{man_path}: not a tensor manifest")
    entries = []
    for line in text[1:]:
        if not line.strip():
            continue
        name, dtype, shape, offset, nbytes, digest = line.split()
        dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
        entries.append((name, np.dtype(dtype), dims, int(offset), int(nbytes), digest))
    return entries


def load_tensors(stem) -> dict:
    bin_path, _ = _paths(stem)
    entries = read_manifest(stem)
    try:
        payload = bin_path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read tensor payload {bin_path}: {exc}") from exc
    out = {}
    for name, dtype, dims, offset, nbytes, digest in entries:
        raw = payload[offset:offset + nbytes]
        if len(raw) != nbytes or hashlib.sha256(raw).hexdigest() != digest:
            raise CheckpointError(f"{bin_path}: checksum mismatch for tensor {name!r}")
        out[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    return out


def save_module(stem, module) -> int:
    return save_tensors(stem, {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()})


def load_module(stem, module):
    import torch

    tensors = load_tensors(stem)
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    module.load_state_dict(state)
    return module
