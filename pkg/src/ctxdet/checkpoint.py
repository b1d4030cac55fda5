"""Binary checkpoint format.

Layout: magic "CDFD", u32 format version, u32 length + canonical JSON config
blob, then one record per array: u32 name length, UTF-8 name, u8 dtype tag
(0 = float32), u32 rank, u32 per-dim sizes, row-major little-endian float32
payload. Everything is little-endian. Optimizer state shares the record
space under an "opt/" name prefix, which cannot collide with parameter
names. Load followed by save reproduces the file byte for byte.
"""

import json
import struct

import numpy as np

from .errors import ParseError
from .ioutil import canonical_json
from .tensor import Tensor

MAGIC = b"CDFD"
VERSION = 1
DTYPE_F32 = 0


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    name_b = name.encode("utf-8")
    fh.write(struct.pack("<I", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<B", DTYPE_F32))
    fh.write(struct.pack("<I", data.ndim))
    for d in data.shape:
        fh.write(struct.pack("<I", d))
    fh.write(data.tobytes())


def save_checkpoint(path, params: dict, config: dict,
                    opt_state: dict = None) -> None:
    """Write params (and optionally optimizer state) with a config blob."""
    records = {name: p.data for name, p in params.items()}
    if opt_state is not None:
        records["opt/step"] = np.array([opt_state["step"]], dtype=np.float64)
        for name, arr in opt_state["m"].items():
            records[f"opt/m/{name}"] = arr
        for name, arr in opt_state["v"].items():
            records[f"opt/v/{name}"] = arr

    blob = canonical_json(config).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in sorted(records):
            _write_record(fh, name, records[name])


def _read_exactly(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ParseError(f"truncated checkpoint: wanted {n} bytes, "
                         f"got {len(buf)}")
    return buf


def _read_u32(fh) -> int:
    return struct.unpack("<I", _read_exactly(fh, 4))[0]


def load_checkpoint(path):
    """Read back (params, config, opt_state); opt_state is None if absent.

    Parameters come up as float64 trainable tensors; the float32 payload
    embeds exactly, so a save/load/save cycle is byte-identical.
    """
    with open(path, "rb") as fh:
        if _read_exactly(fh, 4) != MAGIC:
            raise ParseError(f"{path}: bad magic, not a checkpoint")
        version = _read_u32(fh)
        if version != VERSION:
            raise ParseError(f"{path}: unsupported format version {version}")
        blob = _read_exactly(fh, _read_u32(fh))
        try:
            config = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"{path}: config blob is not valid JSON: {exc}")

        records = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise ParseError(f"{path}: truncated record header")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exactly(fh, name_len).decode("utf-8")
            (tag,) = struct.unpack("<B", _read_exactly(fh, 1))
            if tag != DTYPE_F32:
                raise ParseError(f"{path}: record {name!r} has unknown "
                                 f"dtype tag {tag}")
            rank = _read_u32(fh)
            shape = tuple(_read_u32(fh) for _ in range(rank))
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            payload = _read_exactly(fh, 4 * count)
            arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
            if name in records:
                raise ParseError(f"{path}: duplicate record {name!r}")
            records[name] = arr.astype(np.float64)

    params = {}
    opt = {"step": 0, "m": {}, "v": {}}
    has_opt = False
    for name, arr in records.items():
        if name == "opt/step":
            opt["step"] = int(arr[0])
            has_opt = True
        elif name.startswith("opt/m/"):
            opt["m"][name[len("opt/m/"):]] = arr
            has_opt = True
        elif name.startswith("opt/v/"):
            opt["v"][name[len("opt/v/"):]] = arr
            has_opt = True
        else:
            params[name] = Tensor(arr, requires_grad=True)
    return params, config, (opt if has_opt else None)
