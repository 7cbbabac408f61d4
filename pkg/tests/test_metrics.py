import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardioshape.alignment import rotation_about
from cardioshape.mesh_core import Mesh, MeshError, icosphere, submesh
from cardioshape.metrics import (
    REPORT_COLUMNS,
    GridFrame,
    TopologyMismatchError,
    align_for_eval,
    dice,
    directed_distances,
    directed_distances_brute_force,
    evaluate_cohort,
    evaluate_pair,
    mesh_dice,
    point_triangle_distance,
    points_inside_grid,
    surface_distances,
    voxelize,
)
from cardioshape.synthetic import make_phantom


def box(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    v = lo + corners * (hi - lo)
    # index = 4x + 2y + z; each quad split into two outward triangles
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    f = []
    for a, b, c, d in quads:
        f += [(a, b, c), (a, c, d)]
    return Mesh(v, f)


def test_box_orientation():
    from cardioshape.mesh_core import enclosed_volume

    assert enclosed_volume(box([0, 0, 0], [10, 20, 30])) == pytest.approx(6.0)


def test_voxel_count_of_box_matches_analytic():
    frame = GridFrame((0.0, 0.0, 0.0), 0.5, (20, 20, 20))
    occ = voxelize(box([1.1, 2.3, 0.6], [4.4, 5.05, 7.2]), frame)
    c = frame.centers(0)
    inside = lambda a, b: ((c > a) & (c < b)).sum()
    assert occ.sum() == inside(1.1, 4.4) * inside(2.3, 5.05) * inside(0.6, 7.2)


def test_voxelized_sphere_volume():
    sphere = icosphere(10.0, 4)
    frame = GridFrame.enclosing([sphere], 0.5)
    vol = voxelize(sphere, frame).sum() * frame.voxel_volume_ml
    assert vol == pytest.approx(4 / 3 * np.pi * 10**3 / 1000, rel=0.01)


def test_points_inside_brute_force_parity(rng):
    sphere = icosphere(5.0, 2)
    xs = np.sort(rng.uniform(-6, 6, 7))
    ys = np.sort(rng.uniform(-6, 6, 6))
    zs = np.sort(rng.uniform(-6, 6, 5))
    got = points_inside_grid(sphere, xs, ys, zs)
    # independent oracle: crossings of a +z ray, counted face by face
    tri = sphere.vertices[sphere.faces]
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            for k, z in enumerate(zs):
                hits = 0
                for a, b, c in tri:
                    m = np.array([[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]])
                    if abs(np.linalg.det(m)) < 1e-14:
                        continue
                    u, v = np.linalg.solve(m, [x - a[0], y - a[1]])
                    if u >= 0 and v >= 0 and u + v <= 1:
                        zz = a[2] + u * (b[2] - a[2]) + v * (c[2] - a[2])
                        hits += zz > z
                assert got[i, j, k] == bool(hits % 2)


def test_open_mesh_cannot_be_voxelized():
    sphere = icosphere(1.0, 1)
    half = submesh(sphere, sphere.vertices[sphere.faces].mean(1)[:, 2] > 0)
    with pytest.raises(MeshError):
        voxelize(half, GridFrame.enclosing([half]))


def test_dice_values():
    a = np.zeros((4, 4), bool)
    b = a.copy()
    a[:2] = True
    b[1:3] = True
    assert dice(a, b) == 0.5
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(np.zeros(3, bool), np.zeros(3, bool)) == 1.0
    with pytest.raises(ValueError):
        dice(a, a[:2])


def test_shifted_box_dice():
    a = box([0, 0, 0], [10, 10, 10])
    b = box([5, 0, 0], [15, 10, 10])
    assert mesh_dice(a, b, 0.5) == pytest.approx(0.5)


def test_point_triangle_regions():
    a, b, c = np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0])
    pts = np.array([
        [0.2, 0.2, 2.0],  # face
        [-1.0, -1.0, 0.0],  # vertex a
        [0.5, -2.0, 0.0],  # edge ab
        [1.0, 1.0, 0.0],  # edge bc
        [3.0, 0.0, 0.0],  # vertex b
    ])
    d = point_triangle_distance(pts, a, b, c)
    np.testing.assert_allclose(d, [2.0, np.sqrt(2), 2.0, np.sqrt(0.5), 2.0], atol=1e-12)


def test_degenerate_triangle_distance():
    a = np.array([0.0, 0, 0])
    d = point_triangle_distance(np.array([[0.5, 1.0, 0.0]]), a, np.array([1.0, 0, 0]), np.array([2.0, 0, 0]))
    assert d[0] == pytest.approx(1.0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_accelerated_distances_bit_equal(seed):
    rng = np.random.default_rng(seed)
    mesh = icosphere(5.0, 1)
    mesh = mesh.with_vertices(mesh.vertices + rng.normal(size=mesh.vertices.shape) * 0.5)
    pts = rng.normal(size=(60, 3)) * 6
    np.testing.assert_array_equal(
        directed_distances(pts, mesh), directed_distances_brute_force(pts, mesh)
    )


def test_concentric_sphere_distances():
    inner, outer = icosphere(5.0, 3), icosphere(7.0, 3)
    mean, hd = surface_distances(inner, outer)
    # vertices lie on the true spheres; faces sit slightly inside
    assert 1.9 < mean < 2.1 and 2.0 <= hd < 2.2


def test_align_for_eval_removes_pose(phantom):
    rot = rotation_about([1, 1, 0], 0.2)
    moved = phantom.transformed(lambda p: p @ rot.T + [5, -3, 2])
    back = align_for_eval(moved, phantom)
    np.testing.assert_allclose(back.points, phantom.points, atol=1e-9)


def test_evaluate_pair_identity(phantom):
    ev = evaluate_pair("S0000", phantom, phantom, spacing=1.5)
    row = ev.row()
    assert row["dice_lv_epi"] == 1.0 and row["msd_rv"] == pytest.approx(0.0, abs=1e-9)
    assert row["dlv_vol_abs"] == pytest.approx(0.0, abs=1e-9)


def test_relative_deltas(phantom):
    bigger = make_phantom([0.5, 0, 0, 0])
    row = evaluate_pair("S", bigger, phantom, spacing=2.0).row()
    from cardioshape.metrics import region_volumes

    p, r = region_volumes(bigger), region_volumes(phantom)
    # rigid alignment keeps scale, so deltas are those of the raw volumes
    assert row["dlv_vol_abs"] == pytest.approx(abs(p.lv_volume - r.lv_volume), rel=1e-9)
    assert row["dlv_vol_rel"] == pytest.approx(100 * abs(p.lv_volume - r.lv_volume) / r.lv_volume, rel=1e-9)


def test_report_csv(tmp_path, phantom):
    other = make_phantom([0.3, -0.2, 0.1, 0.2])
    report = evaluate_cohort([("A", phantom, phantom), ("B", other, phantom)], spacing=2.0)
    report.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert tuple(rows[0]) == REPORT_COLUMNS
    assert [r[0] for r in rows[1:]] == ["A", "B", "mean", "sd"]
    d = report.column("dice_lv_epi")
    assert float(rows[3][2]) == pytest.approx(d.mean())
    assert float(rows[4][2]) == pytest.approx(np.std(d, ddof=1))


def test_single_subject_sd_zero(phantom):
    report = evaluate_cohort([("A", phantom, phantom)], spacing=2.0)
    assert set(report.sd().values()) == {0.0}


def test_topology_mismatch(phantom):
    from cardioshape.mesh_core import BiventricularShape

    # same surface, faces listed from a different starting vertex
    rv = Mesh(phantom.rv.vertices, phantom.rv.faces[:, [1, 2, 0]], phantom.rv.regions)
    alt = BiventricularShape(phantom.lv, rv)
    with pytest.raises(TopologyMismatchError, match="A"):
        evaluate_cohort([("A", alt, phantom), ("B", phantom, phantom)])
