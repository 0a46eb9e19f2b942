import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qattn._fp22 import fp22_matmul
from qattn.formats import cast_fp8, truncate_to_fp22


def slow_fp22_matmul(a, b, acc=None, chunk=1):
    """Scalar reference: float32 add of an exact product, then drop 10 bits."""
    m, kd = a.shape
    out = np.zeros((m, b.shape[1]), np.float32) if acc is None else np.array(acc, np.float32)
    for r in range(m):
        for c in range(b.shape[1]):
            x = out[r, c]
            for k0 in range(0, kd, chunk):
                part = sum(float(a[r, k]) * float(b[k, c]) for k in range(k0, min(k0 + chunk, kd)))
                x = np.float32(truncate_to_fp22(np.float32(float(x) + part)))
            out[r, c] = x
    return out


@given(st.integers(0, 10**6), st.sampled_from([1, 4, 32]))
def test_matches_scalar_reference(seed, chunk):
    rng = np.random.default_rng(seed)
    a = cast_fp8(rng.uniform(0, 448, (3, 40)))
    b = cast_fp8(rng.standard_normal((40, 4)) * 50 + 100)
    acc = rng.standard_normal((3, 4)).astype(np.float32) * 1000
    assert np.array_equal(fp22_matmul(a, b, acc, chunk), slow_fp22_matmul(a, b, acc, chunk))


def test_zero_inputs():
    assert np.all(fp22_matmul(np.zeros((4, 8)), np.ones((8, 3))) == 0)


def test_exact_when_representable():
    a = np.array([[1.0, 2.0, 4.0]])
    b = np.array([[1.0], [0.5], [0.25]])
    assert fp22_matmul(a, b)[0, 0] == 3.0


def test_lossy_for_large_accumulator():
    # 4096 + 1/4 needs 15 significant bits; FP22 keeps 14 (implicit bit + 13).
    out = fp22_matmul(np.array([[1.0]]), np.array([[0.25]]), np.array([[4096.0]], np.float32))
    assert out[0, 0] == 4096.0


def test_bad_chunk():
    with pytest.raises(ValueError):
        fp22_matmul(np.ones((1, 1)), np.ones((1, 1)), chunk=0)
