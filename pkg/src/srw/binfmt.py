"""Fixed-size record container used for datasets and SHAP map archives.

Layout (little-endian)::

    magic (4 bytes) | u32 version | u32 header_len | header JSON (UTF-8)
    | records...

The header carries a ``record`` field list so the reader can rebuild the
packed numpy dtype; records run to end of file.
"""

import hashlib
import json
import struct

import numpy as np

from srw.radar import RDIDataset

VERSION = 1
DATASET_MAGIC = b"SRWD"
SHAP_MAGIC = b"SRWS"


class FormatError(ValueError):
    pass


def _dtype_from_fields(fields):
    return np.dtype([(name, fmt, tuple(shape)) if shape else (name, fmt) for name, fmt, shape in fields])


def write_records(path, magic, header, fields, records):
    header = dict(header, record=fields)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    dtype = _dtype_from_fields(fields)
    records = np.asarray(records, dtype=dtype)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(records.tobytes())


def read_records(path, magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {raw[:4]!r}")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    dtype = _dtype_from_fields(header["record"])
    body = raw[12 + hlen:]
    if len(body) % dtype.itemsize:
        raise FormatError(f"{path}: truncated record")
    return header, np.frombuffer(body, dtype=dtype)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_dataset(path, dataset, header):
    shape = list(dataset.x.shape[1:])
    fields = [["id", "<u8", []], ["origin", "u1", []], ["label", "u1", []], ["x", "<f4", shape]]
    rec = np.zeros(len(dataset), dtype=_dtype_from_fields(fields))
    rec["id"], rec["origin"], rec["label"], rec["x"] = dataset.ids, dataset.origins, dataset.labels, dataset.x
    write_records(path, DATASET_MAGIC, dict(header, shape=shape), fields, rec)


def load_dataset(path):
    header, rec = read_records(path, DATASET_MAGIC)
    ds = RDIDataset(rec["x"].astype(np.float32), rec["label"].astype(np.int64), rec["id"], rec["origin"])
    return header, ds


def save_explanations(path, explanations, header):
    if not explanations:
        shape = header.get("map_shape", [0, 0, 0])
    else:
        shape = list(explanations[0].maps_true.shape)
    fields = [["id", "<u8", []], ["label", "u1", []], ["predicted", "u1", []], ["maps", "<f4", [2] + shape]]
    rec = np.zeros(len(explanations), dtype=_dtype_from_fields(fields))
    for i, e in enumerate(explanations):
        rec[i] = (e.sample_id, e.label, e.predicted, np.stack([e.maps_true, e.maps_pred]))
    write_records(path, SHAP_MAGIC, dict(header, map_shape=shape), fields, rec)


def load_explanations(path):
    """Returns (header, records) with fields id, label, predicted, maps[2, C, H, W]."""
    return read_records(path, SHAP_MAGIC)
