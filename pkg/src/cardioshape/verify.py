"""Oracle checks run by ``cardioshape verify``.

Each check compares an implementation against an independent route (loop
nests, brute-force sums, finite differences, analytic geometry) and reports
pass/fail with the measured discrepancy.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import pdm as pdm_mod
from .cpd import CpdConfig, gaussian_gram, register_nonrigid
from .mesh_core import Mesh, enclosed_volume, icosphere
from .metrics import GridFrame, dice, directed_distances, directed_distances_brute_force, surface_distances, voxelize
from .shape_net import ArchitectureConfig, ShapeNet, mode_weight, weighted_loss, weighted_loss_grad
from .tensor_nn import (
    BatchNorm,
    Conv3x3,
    Dense,
    FullConv,
    MaxPool2,
    ReLU,
    Sigmoid,
    central_difference,
    relative_error,
    sample_indices,
)

GRAD_TOL = 1e-4
# gradients that are structurally zero (e.g. biases feeding batch norm) only show FD noise
GRAD_ZERO_FLOOR = 1e-7


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def conv_loop_oracle(x, w, b):
    c_out, c_in = w.shape[:2]
    n, _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, c_out, h, wd))
    for s in range(n):
        for o in range(c_out):
            for i in range(h):
                for j in range(wd):
                    acc = b[o]
                    for c in range(c_in):
                        for di in range(3):
                            for dj in range(3):
                                acc += w[o, c, di, dj] * xp[s, c, i + di, j + dj]
                    out[s, o, i, j] = acc
    return out


def grad_agreement(analytic, numeric) -> tuple[bool, float]:
    err = relative_error(analytic, numeric)
    tiny = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0)) < GRAD_ZERO_FLOOR
    return err < GRAD_TOL or tiny, err


def layer_gradient_errors(layer, x, rng, samples: int = 12) -> dict[str, tuple[bool, float]]:
    """FD check of d(sum(out * R)) w.r.t. the input and every parameter of ``layer``."""
    out = layer.forward(x, True)
    r = rng.standard_normal(out.shape)

    def f():
        return float(np.sum(layer.forward(x, True) * r))

    layer.forward(x, True)
    gx = layer.backward(r)
    grads = {"input": gx.copy(), **{k: v.copy() for k, v in layer.grads.items()}}
    arrays = {"input": x, **layer.params}
    res = {}
    for name, arr in arrays.items():
        idx = sample_indices(arr.size, samples, rng)
        res[name] = grad_agreement(grads[name].ravel()[idx], central_difference(f, arr, idx))
    return res


def toy_architecture(k: int = 4) -> ArchitectureConfig:
    return ArchitectureConfig(
        sax_slices=3, sax_size=16, lax_size=16, sax_depth=2, lax_depth=1,
        sax_filters=2, lax_filters=2, sax_feature_size=8, lax_feature_size=4,
        mlp_hidden=(4, 4, 4), mlp_output=4, head_hidden=(6, 5, 4), k=k,
    )  # fmt: skip


def activation_signature(net: ShapeNet, extra=()) -> tuple:
    """ReLU masks and pooling argmaxes of the last forward pass: the piecewise-linear branch taken."""
    parts = []
    for branch in net.branches.values():
        for layer in branch.layers:
            if isinstance(layer, ReLU):
                parts.append(layer._cached().tobytes())
            elif isinstance(layer, MaxPool2):
                parts.append(layer.argmax.tobytes())
    return tuple(parts) + tuple(np.asarray(e).tobytes() for e in extra)


def smooth_central_difference(f, signature, array, rng, count, h=1e-5):
    """Central differences at ``count`` random entries whose +-h probes stay on one branch.

    A probe pair that flips a ReLU, a pooling argmax or the sign inside the
    absolute loss straddles a kink, where a finite difference does not
    estimate the derivative; such entries are replaced by fresh draws.
    Returns (indices, estimates, rejected count).
    """
    flat = array.reshape(-1)
    order = rng.permutation(flat.size)
    f()
    base = signature()
    idx, est, rejected = [], [], 0
    for i in order:
        old = flat[i]
        flat[i] = old + h
        fp, sp = f(), signature()
        flat[i] = old - h
        fm, sm = f(), signature()
        flat[i] = old
        if sp != base or sm != base:
            rejected += 1
            continue
        idx.append(i)
        est.append((fp - fm) / (2 * h))
        if len(idx) == count:
            break
    f()
    return np.array(idx, dtype=np.int64), np.array(est), rejected


def network_gradient_errors(seed: int = 0, samples: int = 4) -> dict[str, tuple[bool, float]]:
    """FD check of the batch weighted loss through the composed toy network (float64)."""
    rng = np.random.default_rng(seed)
    arch = toy_architecture()
    net = ShapeNet(arch, seed=seed, dtype=np.float64)
    # zero-initialised biases put dead units exactly on a ReLU kink; check at generic parameters
    for _, layer, key in net.named_params():
        if key in ("b", "beta"):
            layer.params[key] += rng.normal(0.0, 0.1, layer.params[key].shape)
        elif key == "gamma":
            layer.params[key] *= 1.0 + rng.normal(0.0, 0.1, layer.params[key].shape)
    b = 4
    sax = rng.random((b, arch.sax_slices, 16, 16))
    lax = rng.random((b, 1, 16, 16))
    meta = rng.random((b, 11))
    ref = rng.random((b, arch.k))
    state = {}

    def f():
        state["pred"] = net.forward(sax, lax, meta, train=True)
        return weighted_loss(state["pred"], ref)

    def signature():
        return activation_signature(net, [np.sign(state["pred"] - ref)])

    pred = net.forward(sax, lax, meta, train=True)
    g_sax, g_lax, g_meta = net.backward(weighted_loss_grad(pred, ref))
    analytic = {name: layer.grads[key].ravel().copy() for name, layer, key in net.named_params()}
    arrays = {name: layer.params[key] for name, layer, key in net.named_params()}
    for name, arr, g in (("input.sax", sax, g_sax), ("input.lax", lax, g_lax), ("input.meta", meta, g_meta)):
        analytic[name] = g.ravel().copy()
        arrays[name] = arr
    res = {}
    for name, arr in arrays.items():
        idx, est, _ = smooth_central_difference(f, signature, arr, rng, samples)
        if len(idx) == 0:
            res[name] = (False, float("inf"))
        else:
            res[name] = grad_agreement(analytic[name][idx], est)
    return res


def brute_force_mean_cov(shapes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m, d = shapes.shape
    mean = np.zeros(d)
    for i in range(m):
        for a in range(d):
            mean[a] += shapes[i, a] / m
    cov = np.zeros((d, d))
    for i in range(m):
        for a in range(d):
            for c in range(d):
                cov[a, c] += (shapes[i, a] - mean[a]) * (shapes[i, c] - mean[c]) / (m - 1)
    return mean, cov


def unit_cube() -> Mesh:
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    f = [(0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5), (0, 4, 5), (0, 5, 1),
         (2, 3, 7), (2, 7, 6), (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3)]  # fmt: skip
    return Mesh(v, np.array(f))


def box(lo, hi) -> Mesh:
    c = unit_cube()
    return c.with_vertices(np.asarray(lo) + c.vertices * (np.asarray(hi) - np.asarray(lo)))


def sinusoidal_warp_case(seed: int = 0):
    """200-point grid (8 x 5 x 5, 5 mm) and its 2 mm smooth sinusoidal warp."""
    g = np.stack(np.meshgrid(np.arange(8), np.arange(5), np.arange(5), indexing="ij"), -1).reshape(-1, 3) * 5.0
    g = g - g.mean(axis=0)
    disp = 2.0 * np.stack(
        [np.sin(g[:, 1] / 12.0), np.sin(g[:, 2] / 12.0 + 0.5), np.cos(g[:, 0] / 15.0)], axis=1
    )
    return g, g + disp


# ---------------------------------------------------------------------------


def _checks(seed: int) -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
    rng = np.random.default_rng(seed)

    def conv_oracle():
        layer = Conv3x3(2, 3, rng, np.float64)
        layer.params["b"] = rng.standard_normal(3)
        x = rng.standard_normal((1, 2, 4, 4))
        err = np.abs(layer.forward(x) - conv_loop_oracle(x, layer.params["w"], layer.params["b"])).max()
        return err < 1e-12, f"max abs diff {err:.3g}"

    def pool_oracle():
        x = rng.standard_normal((1, 4, 8, 8))
        ref = np.array([[[[x[0, c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max() for j in range(4)]
                          for i in range(4)] for c in range(4)]])  # fmt: skip
        return bool(np.array_equal(MaxPool2().forward(x), ref)), "block maxima"

    def fullconv_oracle():
        layer = FullConv(2, 3, 3, 4, rng, np.float64)
        x = rng.standard_normal((2, 2, 3, 3))
        ref = np.array([[np.sum(layer.params["w"][o] * x[s]) + layer.params["b"][o] for o in range(4)] for s in range(2)])
        err = np.abs(layer.forward(x) - ref).max()
        return err < 1e-12, f"max abs diff {err:.3g}"

    def layer_grads():
        cases = {
            "conv3x3": (Conv3x3(2, 3, rng, np.float64), rng.standard_normal((2, 2, 5, 5))),
            "maxpool2": (MaxPool2(), rng.permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) / 10.0),
            "relu": (ReLU(), rng.standard_normal((3, 7))),
            "sigmoid": (Sigmoid(), rng.standard_normal((3, 7))),
            "dense": (Dense(6, 4, rng, np.float64), rng.standard_normal((3, 6))),
            "batchnorm": (BatchNorm(5, np.float64), rng.standard_normal((6, 5))),
            "final_conv_full": (FullConv(2, 3, 3, 4, rng, np.float64), rng.standard_normal((2, 2, 3, 3))),
        }
        worst, bad = 0.0, []
        for kind, (layer, x) in cases.items():
            for tensor, (ok, err) in layer_gradient_errors(layer, x, rng).items():
                worst = max(worst, err if ok else np.inf)
                if not ok:
                    bad.append(f"{kind}.{tensor}={err:.2g}")
        return not bad, ("worst relative error %.3g" % worst) if not bad else "; ".join(bad)

    def net_grads():
        res = network_gradient_errors(seed)
        bad = [f"{n}={e:.2g}" for n, (ok, e) in res.items() if not ok]
        worst = max(e for ok, e in res.values() if ok)
        return not bad, f"{len(res)} tensors, worst passing {worst:.3g} " + "; ".join(bad)

    def pdm_moments():
        shapes = rng.standard_normal((5, 12))
        mean_bf, cov_bf = brute_force_mean_cov(shapes)
        mean, modes, eig = pdm_mod.pca_spectrum(shapes)
        cov = (modes * eig) @ modes.T
        err = max(np.abs(mean - mean_bf).max(), np.abs(cov - cov_bf).max())
        return err < 1e-12, f"max abs diff {err:.3g}"

    def pdm_roundtrip():
        shapes = rng.standard_normal((5, 30))
        model = pdm_mod.build_pdm(shapes, variance_fraction=1.0)
        rel = max(
            np.linalg.norm(pdm_mod.synthesize(model, pdm_mod.project(model, s)) - s) / np.linalg.norm(s) for s in shapes
        )
        zero = np.abs(pdm_mod.project(model, model.mean)).max()
        return rel < 1e-8 and zero < 1e-12, f"max relative residual {rel:.3g}, |project(mean)| {zero:.3g}"

    def loss_values():
        ok = all(mode_weight(1, k) == 1.0 for k in (1, 4, 28))
        w28 = abs(mode_weight(28, 28) - np.sqrt(1 / 28))
        l4 = abs(weighted_loss(np.ones(4), np.zeros(4)) - (1 + np.sqrt(0.75) + np.sqrt(0.5) + np.sqrt(0.25)))
        order = all(mode_weight(i, 28) > mode_weight(i + 1, 28) for i in range(1, 28))
        return ok and w28 < 1e-12 and l4 < 1e-12 and order, f"w(28,28) err {w28:.2g}, k=4 loss err {l4:.2g}"

    def cpd_self():
        pts, _ = sinusoidal_warp_case()
        res = register_nonrigid(pts, pts)
        g = gaussian_gram((pts - pts.mean(0)) / np.sqrt(np.mean(np.sum((pts - pts.mean(0)) ** 2, 1))), 2.0)
        disp = np.abs(g @ res.coefficients).max()
        return disp < 1e-6, f"max displacement {disp:.3g} mm"

    def cpd_warp():
        src, dst = sinusoidal_warp_case()
        res = register_nonrigid(src, dst, CpdConfig())
        rms = float(np.sqrt(np.mean(np.sum((res.deformed_template - dst) ** 2, 1))))
        rises = np.diff(res.objective)
        slack = 1e-9 * np.maximum(1.0, np.abs(res.objective[:-1]))
        mono = bool(np.all(rises <= slack))
        return rms < 0.1 and mono, f"RMS {rms:.3g} mm, monotone {mono}"

    def dice_cases():
        a, b = box((0, 0, 0), (1, 1, 1)), box((0.5, 0, 0), (1.5, 1, 1))
        frame = GridFrame.enclosing([a, b], 0.25)
        va, vb = voxelize(a, frame), voxelize(b, frame)
        far = voxelize(box((5, 5, 5), (6, 6, 6)), GridFrame.enclosing([a, box((5, 5, 5), (6, 6, 6))], 0.25))
        near = voxelize(a, GridFrame.enclosing([a, box((5, 5, 5), (6, 6, 6))], 0.25))
        vals = (dice(va, va), dice(near, far), dice(va, vb))
        return vals == (1.0, 0.0, 0.5), f"self/disjoint/half = {vals}"

    def distance_exactness():
        mesh_a = icosphere(5.0, 1)
        mesh_b = mesh_a.with_vertices(mesh_a.vertices + rng.normal(0, 0.7, mesh_a.vertices.shape))
        pts = rng.normal(0, 6, (50, 3))
        same = np.array_equal(directed_distances(pts, mesh_b), directed_distances_brute_force(pts, mesh_b))
        return bool(same), "accelerated == brute force (bitwise)"

    def hausdorff_bound():
        base = icosphere(5.0, 1)
        worst = np.inf
        for _ in range(100):
            a = base.with_vertices(base.vertices + rng.normal(0, 1.0, base.vertices.shape))
            b = base.with_vertices(base.vertices + rng.normal(0, 1.0, base.vertices.shape) + rng.normal(0, 2, 3))
            m, h = surface_distances(a, b)
            worst = min(worst, h - m)
        return worst >= 0, f"min(H - M) = {worst:.3g}"

    def sphere_volume():
        v = enclosed_volume(icosphere(10.0, 3)) * 1000.0
        rel = abs(v - 4 / 3 * np.pi * 1000.0) / (4 / 3 * np.pi * 1000.0)
        return rel < 0.01, f"relative error {rel:.3g}"

    return [
        ("conv3x3 vs loop nest", conv_oracle),
        ("maxpool2 vs block max", pool_oracle),
        ("final_conv_full vs loop", fullconv_oracle),
        ("layer gradients vs central differences", layer_grads),
        ("toy network gradient vs central differences", net_grads),
        ("PDM mean/covariance vs double loop", pdm_moments),
        ("PDM synthesize(project(s)) round trip", pdm_roundtrip),
        ("mode weights and weighted loss", loss_values),
        ("CPD self-registration", cpd_self),
        ("CPD sinusoidal warp recovery", cpd_warp),
        ("Dice self/disjoint/half-overlap", dice_cases),
        ("surface distances accelerated vs brute force", distance_exactness),
        ("Hausdorff >= mean distance", hausdorff_bound),
        ("icosphere volume vs analytic", sphere_volume),
    ]


def run_all(seed: int = 0) -> list[CheckResult]:
    results = []
    for name, fn in _checks(seed):
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing oracle is a failed check, not a crash of verify
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail.strip(), time.perf_counter() - t0))
    return results
