import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardioshape.alignment import (
    DegeneratePointSetError,
    RigidTransform,
    align,
    generalized_procrustes,
    procrustes_pair,
    residual,
    rotation_about,
)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.2, 5.0))
def test_pair_recovers_similarity(seed, scale):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(20, 3))
    rot = random_rotation(rng)
    t = rng.normal(size=3) * 10
    dst = scale * src @ rot.T + t
    fit = procrustes_pair(src, dst, with_scale=True)
    np.testing.assert_allclose(fit.rotation, rot, atol=1e-9)
    assert fit.scale == pytest.approx(scale, rel=1e-9)
    np.testing.assert_allclose(fit.apply(src), dst, atol=1e-8)


def test_rigid_fit_keeps_unit_scale(rng):
    src = rng.normal(size=(15, 3))
    fit = procrustes_pair(src, 3 * src)
    assert fit.scale == 1.0


def test_never_reflects(rng):
    src = rng.normal(size=(12, 3))
    mirrored = src * [-1, 1, 1]
    fit = procrustes_pair(src, mirrored)
    assert np.linalg.det(fit.rotation) == pytest.approx(1.0)


def test_flat_vectors_keep_layout(rng):
    src = rng.normal(size=30)
    out = align(src, src + 1.0)
    assert out.shape == (30,)
    np.testing.assert_allclose(out, src + 1.0, atol=1e-12)


def test_collinear_rejected():
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegeneratePointSetError):
        procrustes_pair(line, line)


def test_rodrigues_matches_axis_rotation():
    r = rotation_about([0, 0, 1], np.pi / 2)
    np.testing.assert_allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_compose_order(rng):
    a = RigidTransform(random_rotation(rng), rng.normal(size=3), 2.0)
    b = RigidTransform(random_rotation(rng), rng.normal(size=3), 0.5)
    p = rng.normal(size=(4, 3))
    np.testing.assert_allclose(b.compose(a).apply(p), b.apply(a.apply(p)), atol=1e-12)


def test_gpa_removes_pose(rng):
    base = rng.normal(size=(25, 3)) * 10
    shapes = []
    for _ in range(6):
        noisy = base + rng.normal(size=base.shape) * 0.01
        shapes.append((noisy @ random_rotation(rng).T + rng.normal(size=3) * 20).ravel())
    res = generalized_procrustes(shapes, with_scale=False)
    # every aligned shape sits close to the consensus
    for a in res.aligned:
        assert np.sqrt(residual(a, res.mean) / 25) < 0.05
    np.testing.assert_allclose(res.mean.reshape(-1, 3).mean(axis=0), 0, atol=1e-9)
    assert all(b <= a + 1e-9 for a, b in zip(res.residuals, res.residuals[1:]))


def test_gpa_scaled_mean_has_unit_size(rng):
    shapes = [rng.normal(size=30) * s for s in (1.0, 2.0, 3.0)]
    res = generalized_procrustes(shapes, with_scale=True)
    assert np.sum(res.mean**2) == pytest.approx(1.0)


def test_gpa_needs_two_shapes(rng):
    with pytest.raises(ValueError):
        generalized_procrustes([rng.normal(size=9)])
