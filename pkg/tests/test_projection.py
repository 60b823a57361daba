import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings

from pipeline.Projection import (
    ProjectionMatrix,
    lift_covariance,
    load_projection,
    make_projection,
    save_projection,
)
from pipeline.errors import ConsistencyError, DomainError


def test_projection_is_deterministic():
    a = make_projection(10, 3, seed=42)
    b = make_projection(10, 3, seed=42)
    np.testing.assert_array_equal(a.entries, b.entries)
    assert a.entries.shape == (3, 10)
    assert not np.array_equal(a.entries, make_projection(10, 3, seed=43).entries)


def test_projection_entries_are_read_only():
    R = make_projection(5, 2, seed=1)
    with pytest.raises(ValueError):
        R.entries[0, 0] = 1.0


def test_projection_column_norms_near_one():
    R = make_projection(200, 50, seed=2020)
    assert abs(np.mean(np.diag(R.T @ R.entries)) - 1.0) < 0.1


@pytest.mark.parametrize("p,q", [(1, 1), (5, 5), (5, 0)])
def test_projection_needs_q_below_p(p, q):
    with pytest.raises(DomainError):
        make_projection(p, q, seed=0)


def test_projection_rejects_negative_seed():
    with pytest.raises(DomainError):
        make_projection(5, 2, seed=-1)


def test_lift_identity_has_rank_q():
    R = make_projection(12, 4, seed=9)
    lifted = lift_covariance(R, np.eye(4))
    np.testing.assert_allclose(lifted, R.T @ R.entries, atol=1e-14)
    eig = np.linalg.eigvalsh(lifted)
    assert np.sum(eig > 1e-10) == 4


def test_lift_is_linear_in_sigma():
    R = make_projection(8, 3, seed=5)
    Sigma = np.array([[2.0, 0.3, 0.1], [0.3, 1.0, 0.2], [0.1, 0.2, 0.5]])
    np.testing.assert_allclose(lift_covariance(R, 3.5 * Sigma), 3.5 * lift_covariance(R, Sigma), rtol=1e-12)


def test_lift_with_orthogonal_map_preserves_trace():
    rng = np.random.Generator(np.random.Philox(3))
    Q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    Sigma = np.diag([1.0, 2.0, 3.0, 4.0, 5.0])
    assert np.trace(lift_covariance(Q, Sigma)) == pytest.approx(15.0, rel=1e-12)


def test_lift_rejects_bad_sigma():
    R = make_projection(6, 2, seed=1)
    with pytest.raises(DomainError):
        lift_covariance(R, np.array([[1.0, 0.5], [0.4, 1.0]]))
    with pytest.raises(DomainError):
        lift_covariance(R, np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ConsistencyError):
        lift_covariance(R, np.eye(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=2, max_value=20), st.integers(min_value=0, max_value=2**32))
def test_lift_is_symmetric_psd(p, seed):
    q = max(1, p // 3)
    R = make_projection(p, q, seed=seed)
    rng = np.random.Generator(np.random.Philox(seed))
    A = rng.standard_normal((q, q))
    lifted = lift_covariance(R, A @ A.T + 0.1 * np.eye(q))
    np.testing.assert_allclose(lifted, lifted.T, atol=1e-12)
    eig = np.linalg.eigvalsh(lifted)
    assert eig.min() >= -1e-10 * eig.max()


def test_projection_roughly_preserves_norms():
    R = make_projection(100, 25, seed=77)
    rng = np.random.Generator(np.random.Philox(77))
    x = rng.standard_normal((2000, 100))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    norms = np.sum((x @ R.T) ** 2, axis=1)
    assert abs(norms.mean() - 1.0) < 0.1
    # squared norms are roughly Gamma(10, 0.1); about 6% fall outside the band
    assert np.mean((norms >= 0.4) & (norms <= 1.6)) >= 0.9


def test_save_and_load_projection(tmp_path):
    R = make_projection(7, 3, seed=123)
    path = save_projection(R, tmp_path / "R.csv")
    assert path.read_text().startswith("# projection p=7 q=3 seed=123")
    loaded = load_projection(path)
    np.testing.assert_array_equal(loaded.entries, R.entries)
    assert (loaded.p, loaded.q, loaded.seed) == (7, 3, 123)


def test_load_projection_needs_header(tmp_path):
    path = tmp_path / "R.csv"
    path.write_text("1,2\n3,4\n")
    with pytest.raises(ConsistencyError):
        load_projection(path)


def test_projection_matrix_checks_shape():
    with pytest.raises(ConsistencyError):
        ProjectionMatrix(entries=np.zeros((2, 3)), seed=0, q=3, p=2)
