"""Volume file format.

Layout: a UTF-8 JSON header object carrying dims, spacing, scanner_id,
dtype ("f64") and byte_order ("little"), terminated by a newline and a NUL
byte, followed by the raw little-endian float64 payload in row-major order.
Round-trips are bit-exact.
"""

import json
import os
import tempfile

import numpy as np

from .errors import VolumeHeaderError, VolumePayloadError, VolumeShapeError

_DTYPE = np.dtype("<f8")


def atomic_write_bytes(path, payload):
    """Write via a temp file in the same directory plus rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_volume(path, volume, spacing=(1.0, 1.0, 1.0), scanner_id=0):
    """Serialize a float64 volume; returns the header dict that was written."""
    volume = np.ascontiguousarray(volume, dtype=np.float64)
    header = {
        "dims": list(volume.shape),
        "spacing": [float(s) for s in spacing],
        "scanner_id": int(scanner_id),
        "dtype": "f64",
        "byte_order": "little",
    }
    blob = json.dumps(header).encode("utf-8") + b"\n\x00" + volume.astype(_DTYPE).tobytes()
    atomic_write_bytes(path, blob)
    return header


def load_volume(path):
    """Read a volume file; returns (volume, header dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(b"\n\x00")
    if sep < 0:
        raise VolumeHeaderError(f"{path}: header terminator not found")
    try:
        header = json.loads(raw[:sep].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeHeaderError(f"{path}: header is not valid JSON ({exc})") from exc
    for key in ("dims", "spacing", "scanner_id", "dtype", "byte_order"):
        if key not in header:
            raise VolumeHeaderError(f"{path}: header is missing {key!r}")
    if header["dtype"] != "f64" or header["byte_order"] != "little":
        raise VolumeHeaderError(f"{path}: unsupported encoding {header['dtype']}/{header['byte_order']}")
    payload = raw[sep + 2:]
    if len(payload) % _DTYPE.itemsize:
        raise VolumePayloadError(f"{path}: payload of {len(payload)} bytes is cut mid-scalar")
    count = len(payload) // _DTYPE.itemsize
    dims = tuple(int(d) for d in header["dims"])
    expected = int(np.prod(dims)) if dims else 0
    if count != expected:
        raise VolumeShapeError(f"{path}: header dims {dims} disagree with payload of {count} scalars")
    volume = np.frombuffer(payload, dtype=_DTYPE).reshape(dims).astype(np.float64)
    return volume, header
