import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardioshape import pdm


def cohort(rng, m=12, n=10, rank=None):
    if rank is None:
        return rng.normal(size=(m, 3 * n))
    basis = rng.normal(size=(rank, 3 * n))
    return rng.normal(size=3 * n) + rng.normal(size=(m, rank)) @ basis


def test_spectrum_matches_covariance_eigendecomposition(rng):
    x = cohort(rng)
    mean, modes, eig = pdm.pca_spectrum(x)
    cov = np.cov(x, rowvar=False)  # 1/(M-1)
    ref = np.sort(np.linalg.eigvalsh(cov))[::-1][: eig.size]
    np.testing.assert_allclose(eig, ref, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(cov @ modes[:, :3], modes[:, :3] * eig[:3], atol=1e-10)


def test_sign_convention(rng):
    _, modes, _ = pdm.pca_spectrum(cohort(rng))
    peak = modes[np.argmax(np.abs(modes), axis=0), np.arange(modes.shape[1])]
    assert np.all(peak > 0)


def test_variance_fraction_selection(rng):
    x = cohort(rng, m=30, rank=5)
    model = pdm.build_pdm(x, variance_fraction=0.9)
    _, _, eig = pdm.pca_spectrum(x)
    frac = np.cumsum(eig) / eig.sum()
    expected = int(np.argmax(frac >= 0.9)) + 1
    assert model.n_modes == expected


def test_degenerate_modes_dropped(rng):
    model = pdm.build_pdm(cohort(rng, m=20, rank=3), variance_fraction=1.0)
    assert model.n_modes == 3


def test_max_modes_cap(rng):
    assert pdm.build_pdm(cohort(rng), variance_fraction=1.0, max_modes=4).n_modes == 4


def test_identical_shapes_rejected(rng):
    s = rng.normal(size=12)
    with pytest.raises(pdm.PDMError):
        pdm.build_pdm([s, s, s])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), beta=st.floats(0.5, 4.0))
def test_unit_encoding_inverts(seed, beta):
    rng = np.random.default_rng(seed)
    model = pdm.build_pdm(cohort(rng), variance_fraction=1.0, beta=beta)
    b = pdm.clamp(model, rng.normal(size=model.n_modes) * np.sqrt(model.eigenvalues) * 5)
    u = pdm.encode_unit(model, b)
    assert np.all((u >= 0) & (u <= 1))
    np.testing.assert_allclose(pdm.decode_unit(model, u), b, atol=1e-10 * np.abs(b).max())


def test_unit_encoding_endpoints(rng):
    model = pdm.build_pdm(cohort(rng), variance_fraction=1.0, beta=3.0)
    lim = 3.0 * np.sqrt(model.eigenvalues)
    np.testing.assert_allclose(pdm.encode_unit(model, lim), 1.0)
    np.testing.assert_allclose(pdm.encode_unit(model, -lim), 0.0)
    np.testing.assert_allclose(pdm.encode_unit(model, 0 * lim), 0.5)


def test_encode_requires_clamping(rng):
    model = pdm.build_pdm(cohort(rng), variance_fraction=1.0)
    with pytest.raises(pdm.PDMError, match="clamped"):
        pdm.encode_unit(model, model.bounds() * 2)


def test_decode_rejects_out_of_range(rng):
    model = pdm.build_pdm(cohort(rng), variance_fraction=1.0)
    with pytest.raises(pdm.PDMError):
        pdm.decode_unit(model, np.full(model.n_modes, 1.5))


def test_truncated_parameters_use_leading_modes(rng):
    model = pdm.build_pdm(cohort(rng), variance_fraction=1.0)
    b = np.array([1.0, -2.0])
    np.testing.assert_allclose(
        pdm.synthesize(model, b), model.mean + model.modes[:, :2] @ b, atol=1e-14
    )
    with pytest.raises(pdm.PDMError):
        pdm.synthesize(model, np.zeros(model.n_modes + 1))


def test_file_round_trip(tmp_path, rng, phantom):
    from cardioshape.mesh_core import to_shape_vector

    base = to_shape_vector(phantom)
    x = base + rng.normal(size=(6, base.size))
    model = pdm.build_pdm(x, topology=phantom, beta=2.5)
    pdm.save_pdm(tmp_path / "m.pdm1", model)
    back = pdm.load_pdm(tmp_path / "m.pdm1")
    for name in ("mean", "modes", "eigenvalues"):
        np.testing.assert_array_equal(getattr(back, name), getattr(model, name))
    assert back.beta == 2.5 and back.training_count == 6
    np.testing.assert_array_equal(back.topology.points, phantom.points)


def test_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"JUNK" + bytes(40))
    with pytest.raises(pdm.PDMError, match="PDM1"):
        pdm.load_pdm(tmp_path / "x")
