"""Acceptance criteria, one PASS/FAIL line each (collected in the terminal summary)."""
import filecmp
import os
import time

import numpy as np
import pytest
import yaml
from scipy.spatial import ConvexHull

from cardioshape import pdm
from cardioshape.alignment import align, generalized_procrustes
from cardioshape.cpd import CpdConfig, register_nonrigid
from cardioshape.mesh_core import Mesh, enclosed_volume, icosphere, lv_epi_mesh, to_shape_vector
from cardioshape.metrics import (
    GridFrame,
    align_for_eval,
    dice,
    directed_distances,
    directed_distances_brute_force,
    mesh_dice,
    surface_distances,
    voxelize,
)
from cardioshape.preprocess import MetadataBounds, encode_metadata
from cardioshape.shape_net import (
    ArchitectureConfig,
    ShapeNet,
    TrainConfig,
    TrainingData,
    mode_weight,
    predict_unit,
    train,
    unit_to_shape,
    weighted_loss,
)
from cardioshape.synthetic import PhantomConfig, make_subject, split_assignment
from cardioshape.tensor_nn import (
    BatchNorm,
    Conv3x3,
    Dense,
    FullConv,
    MaxPool2,
    ReLU,
    Sigmoid,
    central_difference,
    relative_error,
)
from cardioshape.verify import network_gradient_errors
from conftest import record

# synthetic study settings
COHORT_SEED = 7
TRAIN_SEED = 3
FILTERS = 4
ITERATIONS = 1500


# -- 1 ------------------------------------------------------------------------


def test_c1_mean_covariance_oracle():
    rng = np.random.default_rng(1)
    shapes = rng.normal(size=(5, 12)) * 10  # 5 shapes, 4 points
    m, d = shapes.shape
    mean = np.zeros(d)
    for i in range(m):
        for a in range(d):
            mean[a] += shapes[i, a]
    mean /= m
    cov = np.zeros((d, d))
    for a in range(d):
        for c in range(d):
            s = 0.0
            for i in range(m):
                s += (shapes[i, a] - mean[a]) * (shapes[i, c] - mean[c])
            cov[a, c] = s / (m - 1)
    mu, modes, eig = pdm.pca_spectrum(shapes)
    err = max(np.abs(mu - mean).max(), np.abs((modes * eig) @ modes.T - cov).max())
    assert record("C1 mean/covariance oracle", err < 1e-12, f"max abs diff {err:.2e} (tol 1e-12)")


# -- 2 ------------------------------------------------------------------------


def test_c2_projection_round_trip():
    rng = np.random.default_rng(2)
    shapes = rng.normal(size=(5, 12)) * 10
    model = pdm.build_pdm(shapes, variance_fraction=1.0)
    assert model.n_modes == 4  # full rank for 5 centred shapes
    rel = max(
        np.linalg.norm(pdm.synthesize(model, pdm.project(model, s)) - s) / np.linalg.norm(s)
        for s in shapes
    )
    zero = np.abs(pdm.project(model, model.mean)).max()
    ok = rel < 1e-8 and zero < 1e-12
    assert record("C2 projection round trip", ok, f"max rel residual {rel:.2e}, |project(mean)| {zero:.2e}")


# -- 3 ------------------------------------------------------------------------


def test_c3_loss_weights():
    first = [mode_weight(1, k) for k in (1, 4, 28)]
    last = abs(mode_weight(28, 28) - np.sqrt(1 / 28))
    unit = abs(weighted_loss(np.ones(4), np.zeros(4)) - (1 + np.sqrt(0.75) + np.sqrt(0.5) + np.sqrt(0.25)))
    w = [mode_weight(i, 28) for i in range(1, 29)]
    ordered = all(a > b for a, b in zip(w, w[1:]))
    ok = first == [1.0, 1.0, 1.0] and last < 1e-12 and unit < 1e-12 and ordered
    assert record(
        "C3 loss weights",
        ok,
        f"w(1,k)={first}, w(28,28) err {last:.1e}, k=4 unit loss err {unit:.1e}, decreasing {ordered}",
    )


# -- 4 ------------------------------------------------------------------------


def _layer_fd(layer, x, rng, count=15):
    out = layer.forward(x, True)
    r = rng.normal(size=out.shape)
    gx = layer.backward(r).copy()
    grads = {k: v.copy() for k, v in layer.grads.items()}

    def f():
        return float(np.sum(layer.forward(x, True) * r))

    errs = {}
    for name, arr, g in [("input", x, gx)] + [(k, layer.params[k], grads[k]) for k in layer.params]:
        idx = rng.choice(arr.size, min(count, arr.size), replace=False)
        errs[name] = relative_error(g.ravel()[idx], central_difference(f, arr, idx, h=1e-6))
    return errs


def test_c4_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    bn = BatchNorm(5, np.float64)
    bn.params["gamma"][:] = 1 + 0.2 * rng.normal(size=5)
    bn.params["beta"][:] = rng.normal(size=5)
    cases = {
        "conv3x3": (Conv3x3(2, 3, rng, np.float64), rng.normal(size=(2, 2, 8, 8))),
        "maxpool": (MaxPool2(), rng.normal(size=(2, 2, 8, 8))),
        "relu": (ReLU(), rng.normal(size=(3, 10))),
        "sigmoid": (Sigmoid(), rng.normal(size=(3, 10))),
        "dense": (Dense(6, 4, rng, np.float64), rng.normal(size=(3, 6))),
        "batchnorm": (bn, rng.normal(size=(6, 5))),
        "fullconv": (FullConv(2, 4, 4, 3, rng, np.float64), rng.normal(size=(2, 2, 4, 4))),
    }
    worst = {}
    for kind, (layer, x) in cases.items():
        worst[kind] = max(_layer_fd(layer, x, rng).values())
    net = network_gradient_errors(seed=0)
    net_ok = all(ok for ok, _ in net.values())
    # tensors whose true gradient is zero (biases feeding batch norm) pass on magnitude alone
    floored = [n for n, (ok, e) in net.items() if ok and e >= 1e-4]
    net_worst = max(e for _, e in net.values() if e < 1e-4)
    seconds = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and net_ok and seconds < 120
    detail = (
        f"worst layer rel err {max(worst.values()):.1e}, composed net ({len(net)} tensors) "
        f"all pass {net_ok}, worst {net_worst:.1e} over {len(net) - len(floored)} tensors, "
        f"{len(floored)} structurally zero (|g| < 1e-7), {seconds:.1f} s (tol 1e-4, 120 s)"
    )
    assert record("C4 gradient checks", ok, detail)


# -- 5 ------------------------------------------------------------------------


def _warp_cloud():
    g = np.stack(np.meshgrid(np.arange(8), np.arange(5), np.arange(5), indexing="ij"), -1)
    g = g.reshape(-1, 3) * 5.0
    g -= g.mean(axis=0)
    disp = 2.0 * np.stack(
        [np.sin(g[:, 1] / 12.0), np.sin(g[:, 2] / 12.0 + 0.5), np.cos(g[:, 0] / 15.0)], axis=1
    )
    return g, g + disp


def test_c5_cpd():
    src, dst = _warp_cloud()
    assert len(src) == 200
    t0 = time.perf_counter()
    same = register_nonrigid(src, src)
    t_self = time.perf_counter() - t0
    disp = np.abs(same.deformed_template - src).max()
    t0 = time.perf_counter()
    warp = register_nonrigid(src, dst, CpdConfig())
    t_warp = time.perf_counter() - t0
    rms = float(np.sqrt(np.mean(np.sum((warp.deformed_template - dst) ** 2, axis=1))))
    obj = np.asarray(warp.objective)
    mono = bool(np.all(np.diff(obj) <= 1e-9 * np.maximum(1.0, np.abs(obj[:-1]))))
    ok = disp < 1e-6 and rms < 0.1 and mono and max(t_self, t_warp) < 60
    detail = (
        f"self displacement {disp:.1e} mm, warp RMS {rms:.2e} mm, monotone {mono}, "
        f"{max(t_self, t_warp):.2f} s per case"
    )
    assert record("C5 CPD", ok, detail)


# -- 6 ------------------------------------------------------------------------


def _box(lo, hi):
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    v = np.asarray(lo, float) + v * (np.asarray(hi, float) - np.asarray(lo, float))
    f = [(0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5), (0, 4, 5), (0, 5, 1),
         (2, 3, 7), (2, 7, 6), (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3)]  # fmt: skip
    return Mesh(v, f)


def _random_mesh(rng, n=50):
    """Closed star-shaped mesh: hull of n points on a sphere, then radially jittered."""
    pts = rng.normal(size=(n, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    hull = ConvexHull(pts)
    return Mesh(pts * rng.uniform(8, 12, size=(n, 1)), hull.simplices)


def test_c6_metric_oracles():
    rng = np.random.default_rng(6)
    a, b, c = _box((0, 0, 0), (10, 10, 10)), _box((5, 0, 0), (15, 10, 10)), _box((20, 0, 0), (30, 10, 10))
    frame = GridFrame((-1.0, -1.0, -1.0), 1.0, (32, 12, 12))
    # brute-force occupancy straight from voxel centres
    cx, cy, cz = np.meshgrid(frame.centers(0), frame.centers(1), frame.centers(2), indexing="ij")

    def brute(lo, hi):
        return (cx > lo[0]) & (cx < hi[0]) & (cy > lo[1]) & (cy < hi[1]) & (cz > lo[2]) & (cz < hi[2])

    va, vb, vc = voxelize(a, frame), voxelize(b, frame), voxelize(c, frame)
    voxels_exact = (
        np.array_equal(va, brute((0, 0, 0), (10, 10, 10)))
        and np.array_equal(vb, brute((5, 0, 0), (15, 10, 10)))
        and np.array_equal(vc, brute((20, 0, 0), (30, 10, 10)))
    )
    dices = (dice(va, va), dice(va, vc), dice(va, vb))
    dice_ok = voxels_exact and dices == (1.0, 0.0, 0.5) and mesh_dice(a, b) == 0.5

    bit_equal = True
    for _ in range(5):
        m1, m2 = _random_mesh(rng), _random_mesh(rng)
        assert m1.n_vertices == m2.n_vertices == 50
        bit_equal &= np.array_equal(directed_distances(m1.vertices, m2), directed_distances_brute_force(m1.vertices, m2))
        bit_equal &= surface_distances(m1, m2) == surface_distances(m1, m2, accelerated=False)

    hd_ok = True
    for _ in range(100):
        m1 = _random_mesh(rng, 30)
        m2 = _random_mesh(rng, 30)
        m2 = m2.with_vertices(m2.vertices + rng.normal(size=3) * 2)
        mean, hd = surface_distances(m1, m2)
        hd_ok &= hd >= mean

    vol = enclosed_volume(icosphere(10.0, 3))
    exact = 4 / 3 * np.pi * 10.0**3 / 1000.0  # mL
    vol_err = abs(vol - exact) / exact
    ok = dice_ok and bit_equal and hd_ok and vol_err < 0.01
    detail = (
        f"Dice self/disjoint/half {dices} voxels exact {voxels_exact}, distances bit-equal {bit_equal}, "
        f"H >= mean on 100 pairs {hd_ok}, sphere volume error {100 * vol_err:.2f} %"
    )
    assert record("C6 metric oracles", ok, detail)


# -- 7 and 8 ------------------------------------------------------------------


@pytest.fixture(scope="module")
def study():
    cfg = PhantomConfig(subject_count=234, seed=COHORT_SEED)
    subjects = [make_subject(cfg, i) for i in range(cfg.subject_count)]
    split = split_assignment(cfg)
    train_s = [s for s, sp in zip(subjects, split) if sp == "train"]
    test_s = [s for s, sp in zip(subjects, split) if sp == "test"]
    gpa = generalized_procrustes([to_shape_vector(s.shape) for s in train_s], with_scale=False)
    model = pdm.build_pdm(gpa.aligned, max_modes=28, topology=train_s[0].shape)
    k = model.n_modes
    bounds = MetadataBounds.fit([s.metadata for s in train_s])

    def reference(shape):
        b = pdm.project(model, align(to_shape_vector(shape), model.mean))
        return pdm.encode_unit(model, pdm.clamp(model, b))

    def data(group):
        return TrainingData(
            np.array([s.sax for s in group], np.float32),
            np.array([s.lax for s in group], np.float32)[:, None],
            np.array([encode_metadata(s.metadata, bounds) for s in group], np.float32),
            np.array([reference(s.shape) for s in group], np.float32),
        )

    out = {"train": train_s, "test": test_s, "model": model, "k": k}
    out["train_data"], out["test_data"] = data(train_s), data(test_s)
    tc = TrainConfig(iterations=ITERATIONS, seed=TRAIN_SEED)
    for name, use_meta in (("img_mtdt", True), ("img", False)):
        arch = ArchitectureConfig(sax_filters=FILTERS, lax_filters=FILTERS, k=k, use_metadata=use_meta)
        out[name] = train(out["train_data"], arch, tc)
    return out


def test_c7_synthetic_end_to_end(study):
    res = study["img_mtdt"]
    test = study["test_data"]
    pred = predict_unit(res.net, test)
    loss = weighted_loss(pred, test.reference)
    baseline = weighted_loss(np.full_like(pred, 0.5), test.reference)
    dices = []
    for subj, u in zip(study["test"], pred):
        shape = align_for_eval(unit_to_shape(u, study["model"]), subj.shape)
        dices.append(mesh_dice(lv_epi_mesh(shape.lv), lv_epi_mesh(subj.shape.lv)))
    ratio = loss / baseline
    ok = (
        len(study["train"]) == 200
        and len(study["test"]) == 34
        and ratio <= 0.5
        and np.mean(dices) >= 0.85
        and res.seconds <= 20 * 60
    )
    detail = (
        f"k={study['k']}, test loss {loss:.4f} vs baseline {baseline:.4f} (ratio {ratio:.3f}, need <= 0.5), "
        f"LV-epi Dice {np.mean(dices):.3f} (min {np.min(dices):.3f}, need >= 0.85), "
        f"training {res.seconds / 60:.1f} min for {ITERATIONS} iterations (need <= 20)"
    )
    assert record("C7 synthetic end-to-end", ok, detail)


def test_c8_metadata_effect(study):
    test = study["test_data"]
    with_meta = weighted_loss(predict_unit(study["img_mtdt"].net, test), test.reference)
    image_only = weighted_loss(predict_unit(study["img"].net, test), test.reference)
    gain = 100 * (image_only - with_meta) / image_only
    detail = f"IMG+MTDT {with_meta:.4f} vs IMG {image_only:.4f} ({gain:+.1f} %)"
    assert record("C8 metadata effect", with_meta < image_only, detail)


# -- 9 ------------------------------------------------------------------------


def test_c9_prediction_time():
    net = ShapeNet(ArchitectureConfig(sax_filters=FILTERS, lax_filters=FILTERS, k=28), seed=0)
    rng = np.random.default_rng(9)
    sax = rng.random((1, 9, 64, 64))
    lax = rng.random((1, 1, 80, 80))
    meta = rng.random((1, 11))
    net.forward(sax, lax, meta)  # warm-up
    times = []
    for _ in range(5):
        t0 = time.perf_counter()
        out = net.forward(sax, lax, meta)
        times.append(time.perf_counter() - t0)
    # the larger 8-filter variant must also stay under a second
    big = ShapeNet(ArchitectureConfig(k=28), seed=0)
    t0 = time.perf_counter()
    big.forward(sax, lax, meta)
    t_big = time.perf_counter() - t0
    ok = out.shape == (1, 28) and max(times) < 1.0 and t_big < 1.0
    detail = f"forward pass {1000 * np.median(times):.1f} ms ({FILTERS} filters), {1000 * t_big:.1f} ms (8 filters)"
    assert record("C9 prediction time", ok, detail)


# -- 10 -----------------------------------------------------------------------

STAGES = ["gen-synthetic", "register", "build-pdm", "train", "predict", "evaluate", "verify"]


def _tree(root):
    return sorted(os.path.relpath(os.path.join(d, f), root) for d, _, fs in os.walk(root) for f in fs)


def test_c10_determinism(tmp_path, monkeypatch):
    from cardioshape.cli import main

    monkeypatch.chdir(tmp_path)
    for threads in (1, 4):
        base = f"t{threads}"
        cfg = {
            "seed": 5,
            "paths": {k: f"{base}/{k}" for k in ("dataset", "registered", "model", "predictions", "report")},
            "synthetic": {"subject_count": 14},
            "architecture": {"sax_filters": 2, "lax_filters": 2},
            "train": {"iterations": 20, "batch_size": 4, "checkpoint_every": 10},
            "metrics": {"voxel_mm": 2.0},
        }
        (tmp_path / f"{base}.yaml").write_text(yaml.safe_dump(cfg))
        for stage in STAGES:
            code = main([stage, "--config", f"{base}.yaml", "--threads", str(threads)])
            assert code == 0, f"{stage} failed at {threads} threads"
    files_1, files_4 = _tree(tmp_path / "t1"), _tree(tmp_path / "t4")
    differing = [f for f in files_1 if not filecmp.cmp(tmp_path / "t1" / f, tmp_path / "t4" / f, shallow=False)] \
        if files_1 == files_4 else ["file lists differ"]
    ok = files_1 == files_4 and not differing
    detail = f"{len(files_1)} files over {len(STAGES)} stages, differing: {differing[:5] or 'none'}"
    assert record("C10 determinism", ok, detail)
