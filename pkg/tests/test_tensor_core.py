import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vstar.tensor_core import (
    BadMagicError,
    NonFiniteError,
    NotPositiveDefiniteError,
    NotSymmetricError,
    SeededRng,
    ShapeMismatchError,
    TruncatedPayloadError,
    cholesky_factor,
    fd_gradient_check,
    frames_to_temporal_batch,
    is_psd,
    softmax_rows,
    temporal_batch_to_frames,
    tensor_from_bytes,
    tensor_read,
    tensor_to_bytes,
    tensor_write,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def softmax_oracle(m):
    out = []
    for row in m:
        top = max(row)
        ex = [math.exp(x - top) for x in row]
        s = sum(ex)
        out.append([e / s for e in ex])
    return np.array(out)


# -- softmax -----------------------------------------------------------------


def test_softmax_zeros_uniform():
    assert np.array_equal(softmax_rows(np.zeros((2, 2))), np.full((2, 2), 0.5))


def test_softmax_shift_invariance():
    a = softmax_rows([[3.7, 3.7 + 1.25]])
    b = softmax_rows([[0.0, 1.25]])
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_softmax_matches_scalar_oracle_seed7():
    m = SeededRng(7).normal((3, 3))
    assert np.max(np.abs(softmax_rows(m) - softmax_oracle(m))) < 1e-12


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_softmax_rejects_non_finite(bad):
    m = np.zeros((2, 2))
    m[1, 0] = bad
    with pytest.raises(NonFiniteError, match="non-finite"):
        softmax_rows(m)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=finite))
def test_softmax_rows_sum_to_one(m):
    p = softmax_rows(m)
    assert np.all(np.abs(p.sum(axis=1) - 1.0) < 1e-9)
    assert np.all(p >= 0)


# -- rng ---------------------------------------------------------------------


def test_rng_test_vectors():
    assert [int(x) for x in SeededRng(0).next_uint64(3)] == [
        0x02F4BA6408E4D89B, 0x3DD62B0B9CA8C5B2, 0x1C8667A55D902E79]
    assert [int(x) for x in SeededRng(1).next_uint64(3)] == [
        0x4DB6A27B756282DF, 0xD944FA03BABE0E2F, 0x27F872E577060D32]
    assert [int(x) for x in SeededRng(0).split(1).next_uint64(2)] == [0x690F279F4141860C, 0xAA9EA8423437C9C0]


def test_rng_same_seed_same_stream():
    a = SeededRng(123).next_uint64(100_000)
    b = SeededRng(123).next_uint64(100_000)
    assert np.array_equal(a, b)


def test_rng_split_independent_of_position():
    r = SeededRng(5)
    first = r.split(3).normal(4)
    r.normal(1000)
    assert np.array_equal(first, r.split(3).normal(4))
    assert not np.array_equal(r.split(3).normal(4), r.split(4).normal(4))


def test_rng_position_advances():
    r = SeededRng(0)
    assert r.position == 0
    r.next_uint64(8)
    assert r.position > 0


def test_rng_rejects_negative_seed():
    with pytest.raises(ValueError):
        SeededRng(-1)


# -- cholesky ----------------------------------------------------------------


def test_cholesky_identity():
    assert np.array_equal(cholesky_factor(np.eye(3)), np.eye(3))


def test_cholesky_hand_example():
    L = cholesky_factor([[1.0, 0.5], [0.5, 1.0]])
    assert L[0, 0] == 1.0 and L[1, 0] == 0.5 and L[0, 1] == 0.0
    assert abs(L[1, 1] - math.sqrt(0.75)) < 1e-15


def test_cholesky_not_psd_is_distinct_outcome():
    with pytest.raises(NotPositiveDefiniteError):
        cholesky_factor([[1.0, 2.0], [2.0, 1.0]])
    assert not is_psd([[1.0, 2.0], [2.0, 1.0]])
    assert issubclass(NotPositiveDefiniteError, np.linalg.LinAlgError)


def test_cholesky_rejects_asymmetric():
    with pytest.raises(NotSymmetricError):
        cholesky_factor([[1.0, 0.1], [0.0, 1.0]])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_cholesky_reconstructs_spd(n, seed):
    b = SeededRng(seed).normal((n, n))
    a = b @ b.T + 1e-3 * np.eye(n)
    L = cholesky_factor(a)
    assert np.max(np.abs(L @ L.T - a)) < 1e-8
    assert np.allclose(np.triu(L, 1), 0.0)


# -- gradient check ----------------------------------------------------------


def test_fd_quadratic():
    res = fd_gradient_check(lambda x: float(x @ x), np.array([2.0, 4.0]), [1.0, 2.0], h=1e-5)
    assert res.max_rel_error < 1e-6


def test_fd_linear_exact():
    res = fd_gradient_check(lambda x: float(np.sum(x)), np.ones(5), np.arange(5.0), h=1e-3)
    assert res.max_rel_error < 1e-10


def test_fd_reports_non_finite_coordinate():
    def f(x):
        with np.errstate(invalid="ignore", divide="ignore"):
            return float(np.log(x[1]) + x[0])

    with pytest.raises(NonFiniteError) as info:
        fd_gradient_check(f, np.array([1.0, 1.0]), [0.0, 1e-4], h=1e-3)
    assert info.value.coordinate == 1


@pytest.mark.parametrize("h", [0.0, -1e-5, 0.1])
def test_fd_rejects_bad_step(h):
    with pytest.raises(ValueError):
        fd_gradient_check(lambda x: 0.0, np.zeros(1), [0.0], h=h)


# -- tensor container --------------------------------------------------------


def test_tensor_scalar_round_trip_bit_exact(tmp_path):
    p = tmp_path / "z.vstr"
    tensor_write(np.zeros((1, 1)), p)
    out = tensor_read(p)
    assert out.shape == (1, 1) and out[0, 0] == 0.0


def test_tensor_seeded_round_trip(tmp_path):
    t = SeededRng(11).uniform(size=(2, 3, 4))
    p = tmp_path / "u.vstr"
    tensor_write(t, p)
    out = tensor_read(p)
    assert out.shape == (2, 3, 4)
    assert np.array_equal(out, t.astype(np.float32).astype(np.float64))
    assert np.max(np.abs(out - t)) <= np.max(np.abs(t)) * 2.0**-24


def test_tensor_layout_bytes():
    buf = tensor_to_bytes(np.array([[1.0, 2.0]]))
    assert buf[:4] == b"VSTR" and buf[4] == 1
    hlen = int.from_bytes(buf[5:9], "little")
    assert buf[9 : 9 + hlen] == b'{"dtype":"f32","shape":[1,2],"order":"row-major"}'
    assert np.array_equal(np.frombuffer(buf[9 + hlen :], "<f4"), [1.0, 2.0])


def test_tensor_bad_magic(tmp_path):
    buf = bytearray(tensor_to_bytes(np.ones(3)))
    buf[:4] = b"XXXX"
    with pytest.raises(BadMagicError, match="bad magic"):
        tensor_from_bytes(bytes(buf))


def test_tensor_truncated():
    buf = tensor_to_bytes(np.ones((4, 4)))
    with pytest.raises(TruncatedPayloadError):
        tensor_from_bytes(buf[:-3])
    with pytest.raises(TruncatedPayloadError):
        tensor_from_bytes(buf[:12])


def test_tensor_shape_mismatch():
    buf = tensor_to_bytes(np.ones(4)) + b"\0\0\0\0"
    with pytest.raises(ShapeMismatchError):
        tensor_from_bytes(buf)


def test_tensor_errors_are_distinct():
    assert len({BadMagicError, TruncatedPayloadError, ShapeMismatchError}) == 3
    assert not issubclass(TruncatedPayloadError, ShapeMismatchError)


def test_tensor_rejects_nan():
    with pytest.raises(NonFiniteError):
        tensor_to_bytes(np.array([np.nan]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_tensor_round_trip_within_one_ulp(t):
    out = tensor_from_bytes(tensor_to_bytes(t))
    assert out.shape == t.shape
    f32 = t.astype(np.float32)
    assert np.all(np.abs(out - t) <= np.spacing(np.abs(f32)) + 1e-300)


# -- layout ------------------------------------------------------------------


def test_temporal_batch_permutation():
    x = np.arange(2 * 3 * 4 * 5, dtype=float).reshape(2, 3, 4, 5)
    y = frames_to_temporal_batch(x)
    assert y.shape == (20, 2, 3)
    # spatial (1, 2) of frame 1, channel 2
    assert y[1 * 5 + 2, 1, 2] == x[1, 2, 1, 2]
    assert np.array_equal(temporal_batch_to_frames(y, 4, 5), x)
