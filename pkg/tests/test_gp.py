import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cnngp.errors import DataError, NumericError
from cnngp.gp import (
    RESIDUAL_TOL,
    encode_targets,
    error_rate,
    predict,
    read_gram,
    solve,
    write_gram,
)


def test_encode_targets_examples():
    row = encode_targets([3], 10)[0]
    assert row.tolist() == [-1, -1, -1, 1, -1, -1, -1, -1, -1, -1]
    assert encode_targets([0, 1], 2).tolist() == [[1, -1], [-1, 1]]
    with pytest.raises(DataError):
        encode_targets([2], 2)
    with pytest.raises(DataError):
        encode_targets([-1], 2)


def test_solve_identity_and_scaled():
    y = encode_targets([0, 3, 1, 2], 4)
    np.testing.assert_allclose(solve(np.eye(4), y, jitter=0).alpha, y)
    s = solve(2 * np.eye(2), np.array([[1.0], [-1.0]]), jitter=0)
    np.testing.assert_allclose(s.alpha[:, 0], [0.5, -0.5])
    assert s.jitter == 0


def test_solve_rank_deficient():
    ones = np.ones((3, 3))
    y = encode_targets([0, 1, 0], 2)
    with pytest.raises(NumericError):
        solve(ones, y, jitter=0, escalate=False)
    s = solve(ones, y, jitter=1e-6)
    assert s.jitter == 1e-6
    assert np.abs((ones + 1e-6 * np.eye(3)) @ s.alpha - y).max() <= RESIDUAL_TOL * np.abs(y).max()


def test_solve_ladder_escalates_and_reports(rng):
    a = rng.standard_normal((30, 5))
    k = a @ a.T  # rank 5
    y = encode_targets(rng.integers(0, 3, 30), 3)
    s = solve(k, y)
    assert s.jitter > 1e-10 * np.mean(np.diag(k))
    assert s.attempts > 1 and s.residual <= RESIDUAL_TOL


def test_solve_ceiling_exhausted():
    k = np.array([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(NumericError, match="1e-2"):
        solve(k, np.ones((2, 1)))


def test_solve_rejects_non_square():
    with pytest.raises(DataError):
        solve(np.ones((2, 3)), np.ones((2, 1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(0, 10**6))
def test_residual_contract(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, max(1, n // 2)))
    k = a @ a.T + 1e-3 * rng.random() * np.eye(n)
    y = encode_targets(rng.integers(0, 4, n), 4)
    s = solve(k, y)
    assert np.abs((k + s.jitter * np.eye(n)) @ s.alpha - y).max() <= RESIDUAL_TOL * np.abs(y).max()


def test_predict_examples():
    assert predict(np.eye(1), encode_targets([7], 10)).tolist() == [7]
    alpha = np.array([[0.2, 0.2, -1.0, 0.0]])
    assert predict(np.ones((1, 1)), alpha).tolist() == [0]
    with pytest.raises(DataError):
        predict(np.ones((2, 3)), np.ones((2, 2)))


def _problem(rng, n=40, m=15):
    x = rng.standard_normal((n + m, 6))
    k_all = np.exp(-0.5 * ((x[:, None] - x[None]) ** 2).sum(-1) / 4)
    labels = rng.integers(0, 5, n)
    return k_all[:n, :n], k_all[n:, :n], labels


def test_prediction_scale_invariance(rng):
    k, ks, labels = _problem(rng)
    y = encode_targets(labels, 5)
    base = predict(ks, solve(k, y, jitter=1e-8).alpha)
    scaled = predict(37.5 * ks, solve(37.5 * k, y, jitter=37.5 * 1e-8).alpha)
    np.testing.assert_array_equal(base, scaled)


def test_prediction_permutation_equivariance(rng):
    k, ks, labels = _problem(rng)
    perm = rng.permutation(len(labels))
    a = predict(ks, solve(k, encode_targets(labels, 5), jitter=1e-8).alpha)
    b = predict(
        ks[:, perm], solve(k[np.ix_(perm, perm)], encode_targets(labels[perm], 5), jitter=1e-8).alpha
    )
    np.testing.assert_array_equal(a, b)


def test_error_rate():
    assert error_rate([1, 2, 3], [1, 2, 3]) == 0.0
    assert error_rate([1, 2], [3, 4]) == 1.0
    assert error_rate([0, 1, 2, 3], [0, 1, 2, 0]) == 0.25
    with pytest.raises(DataError):
        error_rate([1], [1, 2])


def test_gram_file_round_trip(tmp_path, rng):
    k = rng.standard_normal((10, 10))
    p = tmp_path / "k.gram"
    write_gram(p, k)
    assert p.stat().st_size == 16 + 800
    raw = p.read_bytes()
    assert raw[:4] == b"CGPK"
    assert int.from_bytes(raw[8:12], "little") == 10 and int.from_bytes(raw[12:16], "little") == 10
    np.testing.assert_array_equal(read_gram(p), k)
    k2 = rng.standard_normal((3, 5))
    write_gram(p, k2)
    np.testing.assert_array_equal(read_gram(p), k2)


def test_gram_file_errors(tmp_path):
    p = tmp_path / "bad.gram"
    p.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(DataError, match="magic"):
        read_gram(p)
    write_gram(p, np.ones((2, 2)))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(DataError, match="bytes"):
        read_gram(p)
