"""Compiled kernel for matrix products through a truncating FP22 accumulator."""

from __future__ import annotations

import numba
import numpy as np
from llvmlite import ir
from numba import types
from numba.extending import intrinsic

_MASK = np.uint32(0xFFFFFC00)


@intrinsic
def _f32_bits(typingctx, x):
    sig = types.uint32(types.float32)

    def codegen(context, builder, signature, args):
        return builder.bitcast(args[0], ir.IntType(32))

    return sig, codegen


@intrinsic
def _bits_f32(typingctx, x):
    sig = types.float32(types.uint32)

    def codegen(context, builder, signature, args):
        return builder.bitcast(args[0], ir.FloatType())

    return sig, codegen


@numba.njit(cache=True)
def _trunc22(x):
    return _bits_f32(_f32_bits(x) & _MASK)


@numba.njit(cache=True)
def _fp22_matmul(a, b, acc, chunk):
    m, kdim = a.shape
    n = b.shape[1]
    row = np.empty(n, dtype=np.float32)
    part = np.empty(n, dtype=np.float64)
    for r in range(m):
        for c in range(n):
            row[c] = acc[r, c]
        if chunk == 1:
            for kk in range(kdim):
                w = a[r, kk]
                if w == 0.0:
                    continue
                for c in range(n):
                    row[c] = _trunc22(row[c] + w * b[kk, c])
        else:
            for k0 in range(0, kdim, chunk):
                k1 = min(k0 + chunk, kdim)
                for c in range(n):
                    part[c] = 0.0
                for kk in range(k0, k1):
                    w = np.float64(a[r, kk])
                    for c in range(n):
                        part[c] += w * np.float64(b[kk, c])
                for c in range(n):
                    row[c] = _trunc22(np.float32(np.float64(row[c]) + part[c]))
        for c in range(n):
            acc[r, c] = row[c]


def fp22_matmul(a: np.ndarray, b: np.ndarray, acc: np.ndarray | None = None, chunk: int = 1) -> np.ndarray:
    """``acc + a @ b`` with FP22 truncation after each product (or each ``chunk``).

    ``a`` and ``b`` must hold values exact in float32 (FP8 codes are); every
    product is then exact, the sum is rounded to float32 and the low 10
    mantissa bits are dropped.  Summation runs in ascending inner index.
    Returns a new float32 array.
    """
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    if acc is None:
        out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    else:
        out = np.array(acc, dtype=np.float32, order="C", copy=True)
    if chunk < 1:
        raise ValueError("chunk must be positive")
    _fp22_matmul(a, b, out, int(chunk))
    return out
