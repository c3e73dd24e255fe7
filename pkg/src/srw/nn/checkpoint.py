"""Binary checkpoint format.

Layout (little-endian)::

    b"SRWM" | u32 version | u32 header_len | header JSON (UTF-8)
    then per tensor: u32 ndim | u32 dims[ndim] | f32 data

The header holds the descriptor, seed, free-form metadata and the ordered
tensor names (parameters first, then batch-norm buffers).
"""

import hashlib
import json
import struct

import numpy as np

from srw.nn.model import ModelState, validate_descriptor

MAGIC = b"SRWM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(model):
    names = list(model.params) + list(model.buffers)
    header = json.dumps({
        "descriptor": model.descriptor,
        "seed": model.seed,
        "meta": model.meta,
        "params": list(model.params),
        "buffers": list(model.buffers),
    }, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    for name in names:
        arr = model.params[name] if name in model.params else model.buffers[name]
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def loads(blob):
    if blob[:4] != MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    validate_descriptor(header["descriptor"])
    tensors = {}
    for name in header["params"] + header["buffers"]:
        (ndim,) = struct.unpack_from("<I", blob, pos)
        shape = struct.unpack_from(f"<{ndim}I", blob, pos + 4)
        pos += 4 + 4 * ndim
        count = int(np.prod(shape, dtype=np.int64))
        if pos + 4 * count > len(blob):
            raise CheckpointError(f"truncated checkpoint at tensor '{name}'")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
    return ModelState(
        descriptor=header["descriptor"],
        params={k: tensors[k] for k in header["params"]},
        buffers={k: tensors[k] for k in header["buffers"]},
        seed=header["seed"],
        train=False,
        meta=header.get("meta", {}),
    )


def save(model, path):
    blob = dumps(model)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def param_digest(model):
    """SHA-256 over parameter and buffer bytes; equal digests mean bit-identical weights."""
    h = hashlib.sha256()
    for group in (model.params, model.buffers):
        for name, arr in group.items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
