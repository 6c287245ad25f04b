"""On-disk formats.

Binary container (checkpoints, datasets, binary lattices)::

    b"TCRBIN1\\n"
    uint64 little-endian: length of the JSON header in bytes
    JSON header (UTF-8, sorted keys): {"meta": {...}, "arrays": [
        {"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    raw little-endian array bytes, C order, concatenated in manifest order

Writing is deterministic: identical inputs give identical bytes.

Lattice text form::

    # tcr-lattice v1
    T U V
    target y_1 ... y_U            (optional)
    t u logp_0 ... logp_V         (one line per cell, row-major, 0-based)

Floats are written with ``repr`` so a reload is bit-exact; ``-inf`` marks
zero probability.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TCRBIN1\n"
LATTICE_TEXT_HEADER = "# tcr-lattice v1"


def write_container(path, meta, arrays):
    manifest, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in "|" else arr.dtype
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        manifest.append(
            {"name": name, "dtype": dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)}
        )
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta, "arrays": manifest}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for data in blobs:
            fh.write(data)


def read_container(path):
    """Return (meta, {name: array}) from a file written by `write_container`."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path} is not a tcr binary container")
    (n,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(raw[start : start + n])
    body = start + n
    arrays = {}
    for item in header["arrays"]:
        lo = body + item["offset"]
        buf = raw[lo : lo + item["nbytes"]]
        arrays[item["name"]] = np.frombuffer(buf, dtype=np.dtype(item["dtype"])).reshape(item["shape"]).copy()
    return header["meta"], arrays


def write_lattice_text(path, logp, target=None):
    logp = np.asarray(logp, dtype=np.float64)
    T, U1, V1 = logp.shape
    lines = [LATTICE_TEXT_HEADER, f"{T} {U1 - 1} {V1 - 1}"]
    if target is not None:
        lines.append(" ".join(["target"] + [str(int(y)) for y in target]))
    for t in range(T):
        for u in range(U1):
            lines.append(" ".join([str(t), str(u)] + [repr(float(v)) for v in logp[t, u]]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_lattice_text(path):
    """Return (logp, target or None)."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0].strip() != LATTICE_TEXT_HEADER:
        raise ValueError(f"{path}: missing lattice header")
    T, U, V = (int(v) for v in lines[1].split())
    body, target = lines[2:], None
    if body and body[0].startswith("target"):
        target = np.array([int(v) for v in body[0].split()[1:]], dtype=np.int64)
        body = body[1:]
    if len(body) != T * (U + 1):
        raise ValueError(f"{path}: expected {T * (U + 1)} cells, found {len(body)}")
    logp = np.empty((T, U + 1, V + 1))
    for ln in body:
        parts = ln.split()
        t, u = int(parts[0]), int(parts[1])
        logp[t, u] = [float(v) for v in parts[2:]]
    return logp, target


def write_lattice_binary(path, logp, target=None):
    arrays = {"logp": np.asarray(logp, dtype=np.float64)}
    if target is not None:
        arrays["target"] = np.asarray(target, dtype=np.int64)
    write_container(path, {"kind": "lattice", "version": 1}, arrays)


def read_lattice_binary(path):
    meta, arrays = read_container(path)
    if meta.get("kind") != "lattice":
        raise ValueError(f"{path} does not hold a lattice")
    return arrays["logp"], arrays.get("target")
