import numpy as np
import pytest

from deepclean import container
from deepclean.pca import PcaModel, fit_pca, load_pca, pca_reconstruct, save_pca


def test_rank_one_line_through_origin():
    direction = np.array([3.0, -1.0, 2.0, 0.5])
    direction /= np.linalg.norm(direction)
    t = np.linspace(-2, 2, 21)[:, None]
    m = fit_pca(t * direction, 1)
    assert abs(abs(m.components[0] @ direction) - 1.0) < 1e-12
    assert np.argmax(np.abs(m.components[0])) == 0 and m.components[0, 0] > 0


def test_components_orthonormal_and_sorted():
    x = np.random.default_rng(0).normal(size=(40, 12)) @ np.diag(np.linspace(3, 0.5, 12))
    m = fit_pca(x, 6)
    assert np.allclose(m.components @ m.components.T, np.eye(6), atol=1e-8)
    assert np.all(np.diff(m.eigenvalues) <= 0) and np.all(m.eigenvalues >= -1e-10)


def test_eigenvalues_match_sample_covariance():
    x = np.random.default_rng(1).normal(size=(30, 6))
    m = fit_pca(x, 6)
    w = np.linalg.eigvalsh(np.cov(x, rowvar=False))[::-1]
    assert np.allclose(m.eigenvalues, w, rtol=1e-10)


def test_full_dimension_reconstruction_exact():
    x = np.random.default_rng(2).normal(size=(20, 8))
    m = fit_pca(x, 8)
    assert np.max(np.abs(pca_reconstruct(m, x) - x)) < 1e-8


def test_mean_and_span_reconstruct_exactly():
    x = np.random.default_rng(3).normal(size=(25, 10))
    m = fit_pca(x, 3)
    assert np.allclose(pca_reconstruct(m, m.mean_vector), m.mean_vector, atol=1e-12)
    inside = m.mean_vector + np.array([0.4, -1.0, 2.0]) @ m.components
    assert np.allclose(pca_reconstruct(m, inside), inside, atol=1e-10)


def test_projection_idempotent():
    x = np.random.default_rng(4).normal(size=(30, 15))
    m = fit_pca(x, 4)
    y = np.random.default_rng(5).normal(size=(5, 15))
    r = pca_reconstruct(m, y)
    assert np.max(np.abs(pca_reconstruct(m, r) - r)) < 1e-10


def test_error_non_increasing_in_k():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(40, 20))
    y = rng.normal(size=20)
    errs = [np.sum((pca_reconstruct(fit_pca(x, k), y) - y) ** 2) for k in range(1, 21)]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
    train = [np.mean((pca_reconstruct(fit_pca(x, k), x) - x) ** 2) for k in range(1, 21)]
    assert all(b < a for a, b in zip(train, train[1:]))


def test_sign_convention_and_determinism():
    x = np.random.default_rng(7).normal(size=(30, 9))
    a, b = fit_pca(x, 5), fit_pca(x.copy(), 5)
    assert np.array_equal(a.components, b.components)
    for row in a.components:
        assert row[np.argmax(np.abs(row))] > 0


def test_k_out_of_range_and_length_mismatch():
    x = np.zeros((5, 8))
    with pytest.raises(ValueError):
        fit_pca(x, 6)
    with pytest.raises(ValueError):
        fit_pca(x, 0)
    m = fit_pca(np.random.default_rng(0).normal(size=(5, 8)), 2)
    with pytest.raises(ValueError):
        pca_reconstruct(m, np.zeros(7))


def test_save_load_round_trip(tmp_path):
    m = fit_pca(np.random.default_rng(8).normal(size=(12, 6)), 3)
    m.standardizer = (1.0, 2.0)
    m.thresholds = {"sample_threshold": 0.3}
    p = tmp_path / "p.dc"
    save_pca(m, p)
    r = load_pca(p)
    assert r.components.tobytes() == m.components.tobytes()
    assert r.mean_vector.tobytes() == m.mean_vector.tobytes()
    assert r.standardizer == (1.0, 2.0) and r.thresholds == m.thresholds


def test_load_rejects_inconsistent_tensors(tmp_path):
    p = tmp_path / "bad.dc"
    container.save(p, "pca", {}, {"mean_vector": np.zeros(6), "components": np.zeros((2, 5)),
                                  "eigenvalues": np.zeros(2)})
    with pytest.raises(container.ShapeConsistencyError):
        load_pca(p)
    container.save(p, "vae", {}, {})
    with pytest.raises(container.LoadError):
        load_pca(p)


def test_model_is_callable_reconstructor():
    x = np.random.default_rng(9).normal(size=(10, 4))
    m = fit_pca(x, 2)
    assert isinstance(m, PcaModel)
    assert np.array_equal(m(x), pca_reconstruct(m, x))
