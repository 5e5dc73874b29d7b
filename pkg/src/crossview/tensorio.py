"""Flat binary container for tensors, plus checkpoint directories.

A tensor file is one UTF-8 header line followed by the raw payload:

    ndt 1 <dtype> <rank> <extent-0> ... <extent-{rank-1}>\\n

where ``dtype`` is ``f32`` or ``f64`` and the payload is the row-major
little-endian bytes of the array. Round-trips are bit-exact; byte order is
fixed so files are portable across hosts.

A checkpoint is a directory of tensor files plus ``manifest.txt``:

    config_hash <hex-or-dash>
    tensor <name> <dtype> <rank> <extents...> <frozen 0|1> <filename>

Manifest lines are written in sorted-name order so two checkpoints with
identical contents are byte-identical directories.
"""

import os

import numpy as np

__all__ = [
    "save_tensor",
    "load_tensor",
    "save_ppm",
    "save_checkpoint",
    "load_checkpoint",
    "FormatError",
]

_MAGIC = "ndt"
_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class FormatError(ValueError):
    """Raised for malformed tensor container files or manifests."""


def save_tensor(path, arr):
    """Write ``arr`` (float32 or float64) to ``path``; bit-exact round-trip."""
    arr = np.asarray(arr)
    tag = _TAGS.get(arr.dtype.newbyteorder("="))
    if tag is None:
        raise FormatError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    header = " ".join(
        [_MAGIC, str(_VERSION), tag, str(arr.ndim)] + [str(int(d)) for d in arr.shape]
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def save_ppm(path, img):
    """Write a (3, H, W) float image in [0, 1] as binary 8-bit PPM."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"expected a (3, H, W) image, got {img.shape}")
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6 {img.shape[2]} {img.shape[1]} 255\n".encode("ascii"))
        fh.write(u8.transpose(1, 2, 0).tobytes())


def load_tensor(path):
    """Read a tensor file; returns a native-endian array of the stored dtype."""
    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            fields = header.decode("utf-8").strip().split()
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: header is not UTF-8") from exc
        if len(fields) < 4 or fields[0] != _MAGIC:
            raise FormatError(f"{path}: bad magic in header {fields[:1]}")
        if fields[1] != str(_VERSION):
            raise FormatError(f"{path}: unsupported version {fields[1]}")
        if fields[2] not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype tag {fields[2]}")
        dtype = _DTYPES[fields[2]]
        try:
            rank = int(fields[3])
            shape = tuple(int(x) for x in fields[4:])
        except ValueError as exc:
            raise FormatError(f"{path}: non-integer rank or extents") from exc
        if len(shape) != rank or any(d < 0 for d in shape):
            raise FormatError(f"{path}: rank {rank} does not match extents {shape}")
        count = int(np.prod(shape)) if shape else 1
        payload = fh.read()
    expected = count * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_checkpoint(dirpath, tensors, frozen=(), config_hash=None):
    """Write named arrays plus a manifest into ``dirpath``.

    ``tensors`` maps name -> array; ``frozen`` is a collection of names
    marked non-trainable; ``config_hash`` ties the checkpoint to the run
    configuration that produced it.
    """
    os.makedirs(dirpath, exist_ok=True)
    frozen = set(frozen)
    unknown = frozen - set(tensors)
    if unknown:
        raise FormatError(f"frozen names not present in tensors: {sorted(unknown)}")
    lines = [f"config_hash {config_hash if config_hash else '-'}"]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        fname = name + ".ndt"
        save_tensor(os.path.join(dirpath, fname), arr)
        tag = _TAGS[arr.dtype.newbyteorder("=")]
        extents = " ".join(str(int(d)) for d in arr.shape)
        flag = "1" if name in frozen else "0"
        lines.append(
            f"tensor {name} {tag} {arr.ndim}{' ' + extents if extents else ''} {flag} {fname}"
        )
    with open(os.path.join(dirpath, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(dirpath):
    """Read a checkpoint directory.

    Returns ``(tensors, frozen, config_hash)`` where ``tensors`` maps name
    to array and ``frozen`` is a set of names. Shapes in the manifest are
    cross-checked against the tensor files.
    """
    manifest = os.path.join(dirpath, "manifest.txt")
    if not os.path.isfile(manifest):
        raise FormatError(f"{dirpath}: missing manifest.txt")
    tensors = {}
    frozen = set()
    config_hash = None
    with open(manifest, "r", encoding="utf-8") as fh:
        for line in fh:
            fields = line.split()
            if not fields:
                continue
            if fields[0] == "config_hash":
                config_hash = None if fields[1] == "-" else fields[1]
            elif fields[0] == "tensor":
                name = fields[1]
                rank = int(fields[3])
                shape = tuple(int(x) for x in fields[4 : 4 + rank])
                flag, fname = fields[4 + rank], fields[5 + rank]
                arr = load_tensor(os.path.join(dirpath, fname))
                if arr.shape != shape:
                    raise FormatError(
                        f"{dirpath}: manifest shape {shape} != stored shape {arr.shape} for {name}"
                    )
                tensors[name] = arr
                if flag == "1":
                    frozen.add(name)
            else:
                raise FormatError(f"{dirpath}: unknown manifest record {fields[0]!r}")
    return tensors, frozen, config_hash
