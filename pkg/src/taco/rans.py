"""ctypes bridge to the optional native rANS entropy-coder library.

The accelerator is a separate shared library exposing a C ABI
(``taco_rans_encode`` / ``taco_rans_decode``).  It consumes the same
integer CDF tables as the reference range coder but writes a different
bitstream (containers record which coder produced them).  Everything here
degrades cleanly: if the library cannot be found, importing this module
still succeeds and the entry points raise ``RansUnavailableError``.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import os
from pathlib import Path
from typing import Optional

import numpy as np

from .cdf import CdfTable
from .errors import CodingError, RansUnavailableError

ENV_VAR = "TACO_RANS_LIB"
_LIB_STEM = "rans_accel"

# Error codes returned by the native entry points.
_ERR_SYMBOL_RANGE = -1
_ERR_BUFFER_SMALL = -2
_ERR_CORRUPT = -3
_ERR_BAD_ARGS = -4

_lib: Optional[ctypes.CDLL] = None
_load_error: Optional[str] = None


def _candidate_paths() -> list[Path]:
    names = [f"lib{_LIB_STEM}.so", f"lib{_LIB_STEM}.dylib", f"{_LIB_STEM}.dll"]
    roots = []
    env = os.environ.get(ENV_VAR)
    if env:
        return [Path(env)]
    here = Path(__file__).resolve()
    for base in (here.parents[2], Path.cwd()):
        for profile in ("release", "debug"):
            roots.append(base / _LIB_STEM / "target" / profile)
    return [root / name for root in roots for name in names]


def _bind(lib: ctypes.CDLL) -> ctypes.CDLL:
    i32p = ctypes.POINTER(ctypes.c_int32)
    u8p = ctypes.POINTER(ctypes.c_uint8)
    common = [i32p, i32p, i32p, ctypes.c_size_t, ctypes.c_size_t, ctypes.c_uint32]
    lib.taco_rans_encode.restype = ctypes.c_int64
    lib.taco_rans_encode.argtypes = [i32p, ctypes.c_size_t, *common,
                                     u8p, ctypes.c_size_t]
    lib.taco_rans_decode.restype = ctypes.c_int64
    lib.taco_rans_decode.argtypes = [u8p, ctypes.c_size_t, *common,
                                     i32p, ctypes.c_size_t]
    return lib


def _load() -> ctypes.CDLL:
    global _lib, _load_error
    if _lib is not None:
        return _lib
    if _load_error is not None:
        raise RansUnavailableError(_load_error)
    tried = []
    for path in _candidate_paths():
        tried.append(str(path))
        if path.is_file():
            try:
                _lib = _bind(ctypes.CDLL(str(path)))
                return _lib
            except OSError as exc:
                _load_error = f"found {path} but could not load it: {exc}"
                raise RansUnavailableError(_load_error) from exc
    found = ctypes.util.find_library(_LIB_STEM)
    if found:
        try:
            _lib = _bind(ctypes.CDLL(found))
            return _lib
        except OSError as exc:
            _load_error = f"found {found} but could not load it: {exc}"
            raise RansUnavailableError(_load_error) from exc
    _load_error = (
        "the native rANS library is not available; build the accelerator "
        f"crate or set {ENV_VAR} to the shared library path (searched: "
        + ", ".join(tried) + ")"
    )
    raise RansUnavailableError(_load_error)


def is_available() -> bool:
    """True when the native library can be loaded."""
    try:
        _load()
        return True
    except RansUnavailableError:
        return False


def _as_i32_ptr(arr: np.ndarray):
    return arr.ctypes.data_as(ctypes.POINTER(ctypes.c_int32))


def _table_args(table: CdfTable):
    cdf = np.ascontiguousarray(table.cdf, dtype=np.int32)
    lengths = np.ascontiguousarray(table.lengths, dtype=np.int32)
    offsets = np.ascontiguousarray(table.offsets, dtype=np.int32)
    # keep the arrays alive alongside the pointers
    ptrs = (_as_i32_ptr(cdf), _as_i32_ptr(lengths), _as_i32_ptr(offsets),
            ctypes.c_size_t(table.num_rows), ctypes.c_size_t(cdf.shape[1]),
            ctypes.c_uint32(table.precision))
    return ptrs, (cdf, lengths, offsets)


def _raise_native(code: int, action: str) -> None:
    if code == _ERR_SYMBOL_RANGE:
        raise CodingError(f"native rANS {action}: symbol outside its code table range")
    if code == _ERR_BUFFER_SMALL:
        raise CodingError(f"native rANS {action}: output buffer too small")
    if code == _ERR_CORRUPT:
        raise CodingError(f"native rANS {action}: compressed stream truncated or corrupt")
    raise CodingError(f"native rANS {action}: error code {code}")


def rans_encode(symbols: np.ndarray, table: CdfTable) -> bytes:
    """Encode one symbol per table row with the native rANS coder."""
    lib = _load()
    symbols = np.ascontiguousarray(symbols, dtype=np.int32).reshape(-1)
    if symbols.size != table.num_rows:
        raise CodingError(
            f"expected {table.num_rows} symbols (one per table row), "
            f"got {symbols.size}"
        )
    table_ptrs, keepalive = _table_args(table)
    cap = 4 * max(1, symbols.size) + 64
    out = np.empty(cap, dtype=np.uint8)
    written = lib.taco_rans_encode(
        _as_i32_ptr(symbols), ctypes.c_size_t(symbols.size), *table_ptrs,
        out.ctypes.data_as(ctypes.POINTER(ctypes.c_uint8)), ctypes.c_size_t(cap),
    )
    del keepalive
    if written < 0:
        _raise_native(written, "encode")
    return out[:written].tobytes()


def rans_decode(data: bytes, table: CdfTable,
                n: Optional[int] = None) -> np.ndarray:
    """Decode ``n`` symbols (default: one per table row) from native rANS."""
    lib = _load()
    if n is None:
        n = table.num_rows
    if n > table.num_rows:
        raise CodingError(
            f"cannot decode {n} symbols with only {table.num_rows} table rows"
        )
    table_ptrs, keepalive = _table_args(table)
    data = bytes(data)
    buf = np.frombuffer(data, dtype=np.uint8) if data else np.zeros(1, np.uint8)
    out = np.empty(max(1, n), dtype=np.int32)
    code = lib.taco_rans_decode(
        buf.ctypes.data_as(ctypes.POINTER(ctypes.c_uint8)),
        ctypes.c_size_t(len(data)), *table_ptrs,
        _as_i32_ptr(out), ctypes.c_size_t(n),
    )
    del keepalive
    if code < 0:
        _raise_native(code, "decode")
    return out[:n].astype(np.int64)
