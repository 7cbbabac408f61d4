"""Three-branch shape-parameter regressor, mode-weighted loss and training loop.

SAX and LAX images pass through separate U-Net-style down-sampling encoders
that end in a full-size convolution producing a feature vector; patient
metadata pass through a small MLP.  The concatenated features feed four fully
connected layers (ReLU, ReLU, sigmoid, sigmoid, each after batch
normalisation) that output the first ``k`` unit-encoded PCA coefficients.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import pdm as pdm_mod
from .mesh_core import BiventricularShape, from_shape_vector
from .preprocess import SubjectSample
from .tensor_nn import (
    AdamState,
    BatchNorm,
    Conv3x3,
    Dense,
    FullConv,
    MaxPool2,
    ReLU,
    Sequential,
    ShapeMismatchError,
    Sigmoid,
    adam_step,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ArchitectureConfig:
    sax_slices: int = 9
    sax_size: int = 64
    lax_size: int = 80
    sax_depth: int = 4
    lax_depth: int = 2
    sax_filters: int = 8  # activation maps in the first encoder stage, doubled per stage
    lax_filters: int = 8
    sax_feature_size: int = 1024
    lax_feature_size: int = 256
    metadata_size: int = 11
    mlp_hidden: tuple = (16, 32, 64)
    mlp_output: int = 128
    head_hidden: tuple = (256, 128, 64)
    k: int = 28
    use_metadata: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mlp_hidden", tuple(self.mlp_hidden))
        object.__setattr__(self, "head_hidden", tuple(self.head_hidden))
        if len(self.head_hidden) != 3:
            raise ValueError("the head has four layers: give three hidden sizes")
        for name, size, depth in (("sax", self.sax_size, self.sax_depth), ("lax", self.lax_size, self.lax_depth)):
            if size % (2**depth):
                raise ValueError(f"{name} size {size} not divisible by 2**{depth}")

    @property
    def fusion_size(self) -> int:
        return self.sax_feature_size + self.lax_feature_size + self.mlp_output

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        d["head_hidden"] = list(self.head_hidden)
        return d


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 10
    iterations: int = 50_000
    seed: int = 0
    checkpoint_every: int = 1000
    # replace the running batch-norm averages by training-set population statistics at the end
    population_stats: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch normalisation")
        if self.iterations < 1:
            raise ValueError("iterations must be positive")


def build_encoder(in_channels: int, size: int, depth: int, filters: int, features: int, rng, dtype) -> Sequential:
    """``depth`` stages of (conv, conv, pool), a two-conv bottom, and a full-size conv.

    Counting convolutions and poolings, depth 2 gives 9 layers and depth 4 gives 15.
    """
    layers = []
    c, f = in_channels, filters
    for _ in range(depth):
        layers += [Conv3x3(c, f, rng, dtype), ReLU(), Conv3x3(f, f, rng, dtype), ReLU(), MaxPool2()]
        c, f, size = f, 2 * f, size // 2
    layers += [Conv3x3(c, f, rng, dtype), ReLU(), Conv3x3(f, f, rng, dtype), ReLU()]
    layers.append(FullConv(f, size, size, features, rng, dtype))
    return Sequential(layers)


def build_mlp(n_in: int, hidden, n_out: int, rng, dtype) -> Sequential:
    layers = []
    for width in (*hidden, n_out):
        layers += [Dense(n_in, width, rng, dtype), ReLU()]
        n_in = width
    return Sequential(layers)


def build_head(n_in: int, hidden, k: int, rng, dtype) -> Sequential:
    layers = []
    for width, act in zip((*hidden, k), (ReLU, ReLU, Sigmoid, Sigmoid)):
        layers += [Dense(n_in, width, rng, dtype), BatchNorm(width, dtype), act()]
        n_in = width
    return Sequential(layers)


class ShapeNet:
    def __init__(self, arch: ArchitectureConfig, seed: int = 0, dtype=np.float32):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.sax = build_encoder(arch.sax_slices, arch.sax_size, arch.sax_depth, arch.sax_filters,
                                 arch.sax_feature_size, rng, dtype)
        self.lax = build_encoder(1, arch.lax_size, arch.lax_depth, arch.lax_filters,
                                 arch.lax_feature_size, rng, dtype)
        self.mlp = build_mlp(arch.metadata_size, arch.mlp_hidden, arch.mlp_output, rng, dtype)
        self.head = build_head(arch.fusion_size, arch.head_hidden, arch.k, rng, dtype)
        self.fusion: Optional[np.ndarray] = None

    @property
    def branches(self) -> dict[str, Sequential]:
        return {"sax": self.sax, "lax": self.lax, "mlp": self.mlp, "head": self.head}

    def astype(self, dtype) -> "ShapeNet":
        self.dtype = np.dtype(dtype)
        for b in self.branches.values():
            b.astype(dtype)
        return self

    def _inputs(self, sax, lax, meta):
        a = self.arch
        sax = np.asarray(sax, dtype=self.dtype)
        lax = np.asarray(lax, dtype=self.dtype)
        meta = np.asarray(meta, dtype=self.dtype)
        if lax.ndim == 3:
            lax = lax[:, None]
        if sax.shape[1:] != (a.sax_slices, a.sax_size, a.sax_size):
            raise ShapeMismatchError(f"SAX input {sax.shape[1:]} != {(a.sax_slices, a.sax_size, a.sax_size)}")
        if lax.shape[1:] != (1, a.lax_size, a.lax_size):
            raise ShapeMismatchError(f"LAX input {lax.shape[1:]} != {(1, a.lax_size, a.lax_size)}")
        if meta.shape[1:] != (a.metadata_size,):
            raise ShapeMismatchError(f"metadata input {meta.shape[1:]} != ({a.metadata_size},)")
        if not a.use_metadata:
            meta = np.zeros_like(meta)
        return sax, lax, meta

    def forward(self, sax, lax, meta, train: bool = False) -> np.ndarray:
        """Batched forward pass; returns (batch, k) values in (0, 1)."""
        sax, lax, meta = self._inputs(sax, lax, meta)
        fused = np.concatenate(
            [self.sax.forward(sax, train), self.lax.forward(lax, train), self.mlp.forward(meta, train)],
            axis=1,
        )
        self.fusion = fused
        return self.head.forward(fused, train)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Accumulate parameter gradients; returns input gradients (sax, lax, meta)."""
        g = self.head.backward(grad)
        a = self.arch
        s1, s2 = a.sax_feature_size, a.sax_feature_size + a.lax_feature_size
        g_sax = self.sax.backward(np.ascontiguousarray(g[:, :s1]))
        g_lax = self.lax.backward(np.ascontiguousarray(g[:, s1:s2]))
        g_meta = self.mlp.backward(np.ascontiguousarray(g[:, s2:]))
        return g_sax, g_lax, g_meta

    # -- parameter access -------------------------------------------------

    def named_params(self):
        """(name, layer, key) for every learnable tensor."""
        for bname, branch in self.branches.items():
            yield from branch.named_params(f"{bname}.")

    def params(self) -> dict[str, np.ndarray]:
        return {name: layer.params[k] for name, layer, k in self.named_params()}

    def grads(self) -> dict[str, np.ndarray]:
        return {name: layer.grads[k] for name, layer, k in self.named_params()}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for bname, branch in self.branches.items():
            out.update(branch.named_tensors(f"{bname}."))
        return out

    def load_state_dict(self, tensors) -> None:
        expected = self.state_dict()
        if set(tensors) != set(expected):
            raise ValueError("checkpoint tensors do not match the architecture")
        for bname, branch in self.branches.items():
            for i, layer in enumerate(branch.layers):
                for store in (layer.params, layer.buffers):
                    for k in store:
                        name = f"{bname}.{i}.{k}"
                        arr = np.asarray(tensors[name], dtype=self.dtype)
                        if arr.shape != store[k].shape:
                            raise ValueError(f"{name}: shape {arr.shape} != {store[k].shape}")
                        store[k] = arr.copy()

    def save(self, path, metadata: Optional[dict] = None) -> None:
        meta = {"architecture": self.arch.to_dict()}
        meta.update(metadata or {})
        save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path, dtype=np.float32) -> tuple["ShapeNet", dict]:
        tensors, meta = load_checkpoint(path)
        net = cls(ArchitectureConfig(**meta["architecture"]), dtype=dtype)
        net.load_state_dict(tensors)
        return net, meta


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def mode_weight(i: int, k: int) -> float:
    """Weight of the i-th (1-based) of k modes: sqrt((k - i + 1) / k)."""
    if not 1 <= i <= k:
        raise ValueError(f"mode index {i} outside 1..{k}")
    return float(np.sqrt((k - i + 1) / k))


def mode_weights(k: int) -> np.ndarray:
    i = np.arange(1, k + 1)
    return np.sqrt((k - i + 1) / k)


def weighted_loss(predicted, reference) -> float:
    """Sum over modes of |predicted - reference| x mode weight; batch mean for 2D input."""
    p = np.asarray(predicted, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if p.shape != r.shape:
        raise ValueError(f"prediction shape {p.shape} != reference shape {r.shape}")
    per_subject = np.abs(p - r) @ mode_weights(p.shape[-1])
    return float(np.mean(per_subject))


def weighted_loss_grad(predicted: np.ndarray, reference: np.ndarray) -> np.ndarray:
    p = np.atleast_2d(predicted)
    r = np.atleast_2d(reference)
    w = mode_weights(p.shape[1]).astype(p.dtype)
    return (np.sign(p - r) * w / p.shape[0]).astype(p.dtype)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainingData:
    """Stacked network inputs: sax (M, 9, H, W), lax (M, 1, H, W), meta (M, 11), reference (M, k)."""

    sax: np.ndarray
    lax: np.ndarray
    meta: np.ndarray
    reference: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.sax)

    def subset(self, idx) -> "TrainingData":
        ref = None if self.reference is None else self.reference[idx]
        return TrainingData(self.sax[idx], self.lax[idx], self.meta[idx], ref)

    @classmethod
    def from_samples(cls, samples: list[SubjectSample], dtype=np.float32) -> "TrainingData":
        refs = [s.reference_params for s in samples]
        reference = None if any(r is None for r in refs) else np.asarray(refs, dtype=dtype)
        return cls(
            np.asarray([s.sax for s in samples], dtype=dtype),
            np.asarray([s.lax for s in samples], dtype=dtype)[:, None],
            np.asarray([s.meta for s in samples], dtype=dtype),
            reference,
        )


@dataclass
class TrainResult:
    net: ShapeNet
    losses: list  # (iteration, batch loss)
    seconds: float


def train(
    data: TrainingData,
    arch: ArchitectureConfig,
    tc: TrainConfig,
    checkpoint_dir=None,
    checkpoint_metadata: Optional[dict] = None,
    progress: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Mini-batch Adam on the weighted loss.

    Every epoch visits a fresh seeded permutation in consecutive batches; the
    incomplete tail batch is dropped.  With ``checkpoint_dir`` set, a
    checkpoint is written every ``checkpoint_every`` iterations and at the end,
    with the loss log in ``train_log.csv``.
    """
    if data.reference is None:
        raise ValueError("training data lacks reference parameters")
    if len(data) < tc.batch_size:
        raise ValueError(f"dataset of {len(data)} subjects is smaller than batch size {tc.batch_size}")
    if data.reference.shape[1] != arch.k:
        raise ValueError(f"reference has {data.reference.shape[1]} modes, network predicts {arch.k}")
    init_ss, shuffle_ss = np.random.SeedSequence(tc.seed).spawn(2)
    net = ShapeNet(arch, seed=int(init_ss.generate_state(1)[0]), dtype=np.float32)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    state = AdamState(learning_rate=tc.learning_rate)
    params = net.params()
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    meta = dict(checkpoint_metadata or {})
    meta["train"] = dataclasses.asdict(tc)

    losses = []
    batches_per_epoch = len(data) // tc.batch_size
    order = np.empty(0, dtype=np.int64)
    start = time.perf_counter()
    for it in range(1, tc.iterations + 1):
        pos = (it - 1) % batches_per_epoch
        if pos == 0:
            order = shuffle_rng.permutation(len(data))
        idx = order[pos * tc.batch_size : (pos + 1) * tc.batch_size]
        batch = data.subset(idx)
        pred = net.forward(batch.sax, batch.lax, batch.meta, train=True)
        loss = weighted_loss(pred, batch.reference)
        net.backward(weighted_loss_grad(pred, batch.reference.astype(pred.dtype)))
        params = net.params()
        adam_step(state, params, net.grads())
        losses.append((it, loss))
        if progress is not None:
            progress(it, loss)
        if it == tc.iterations and tc.population_stats:
            population_batchnorm(net, data, tc.batch_size)
        if ckpt is not None and (it % tc.checkpoint_every == 0 or it == tc.iterations):
            net.save(ckpt / f"checkpoint_{it:06d}.nnet", {**meta, "iteration": it})
    if ckpt is not None:
        with open(ckpt / "train_log.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["iteration", "loss"])
            for it, loss in losses:
                wr.writerow([it, f"{loss:.9g}"])
    return TrainResult(net, losses, time.perf_counter() - start)


def _batchnorm_layers(net: ShapeNet) -> list[BatchNorm]:
    return [l for seq in net.branches.values() for l in seq.layers if isinstance(l, BatchNorm)]


def population_batchnorm(net: ShapeNet, data: TrainingData, batch_size: int) -> None:
    """Set batch-norm inference statistics to averages over training mini-batches.

    The data are walked in order in batches of ``batch_size`` (tail dropped).
    The stored mean is the average batch mean and the stored variance the
    average unbiased batch variance.  Weights are untouched.  The exponential
    running averages lag behind quickly moving weights; these do not.
    """
    layers = _batchnorm_layers(net)
    saved = [l.momentum for l in layers]
    try:
        for j, start in enumerate(range(0, len(data) - batch_size + 1, batch_size)):
            for l in layers:
                l.momentum = j / (j + 1)  # cumulative mean over batches
            b = data.subset(np.arange(start, start + batch_size))
            net.forward(b.sax, b.lax, b.meta, train=True)
    finally:
        for l, m in zip(layers, saved):
            l.momentum = m


def predict_unit(net: ShapeNet, data: TrainingData, batch_size: int = 32) -> np.ndarray:
    """Evaluation-mode forward pass over a dataset, in float64."""
    out = []
    for s in range(0, len(data), batch_size):
        b = data.subset(slice(s, s + batch_size))
        out.append(net.forward(b.sax, b.lax, b.meta, train=False))
    return np.concatenate(out).astype(np.float64)


def unit_to_shape(unit, model: pdm_mod.PointDistributionModel) -> BiventricularShape:
    """Decode unit parameters, clamp, synthesize and rebuild the mesh pair."""
    if model.topology is None:
        raise ValueError("PDM has no topology; cannot build meshes")
    unit = np.clip(np.asarray(unit, dtype=np.float64).ravel(), 0.0, 1.0)
    if unit.size > model.n_modes:
        raise ValueError(f"network predicts {unit.size} modes, PDM has {model.n_modes}")
    b = pdm_mod.clamp(model, pdm_mod.decode_unit(model, unit))
    return from_shape_vector(pdm_mod.synthesize(model, b), model.topology)


def predict_shape(net: ShapeNet, sample: SubjectSample, model: pdm_mod.PointDistributionModel) -> BiventricularShape:
    unit = net.forward(sample.sax[None], sample.lax[None, None], sample.meta[None], train=False)[0]
    return unit_to_shape(unit, model)
