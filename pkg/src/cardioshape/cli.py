"""Command-line pipeline: gen-synthetic, register, build-pdm, train, predict, evaluate, verify.

Every stage reads one YAML configuration (all keys optional, defaults below),
applies flag overrides, logs the resolved configuration to stderr and writes
its results under a single output directory.  Exit codes: 0 success,
1 failed validation or missing inputs, 2 usage or configuration errors.
"""
from __future__ import annotations

import argparse
import copy
import csv
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import yaml

from . import pdm as pdm_mod
from .alignment import align, generalized_procrustes
from .cpd import CpdConfig, fit_template_to_contours, read_contours
from .mesh_core import from_shape_vector, read_shape, same_shape_topology, to_shape_vector, write_shape
from .metrics import evaluate_cohort
from .preprocess import MetadataBounds, encode_metadata, read_metadata_csv, read_tensor
from .shape_net import ArchitectureConfig, ShapeNet, TrainConfig, TrainingData, predict_unit, train, unit_to_shape
from .synthetic import PhantomConfig, generate_cohort, read_manifest

log = logging.getLogger("cardioshape")

DEFAULT_CONFIG = {
    "seed": 0,
    "threads": 1,
    "paths": {
        "dataset": "work/dataset",
        "registered": "work/registered",
        "model": "work/model",
        "predictions": "work/predictions",
        "report": "work/report",
    },
    "synthetic": {
        "subject_count": 60,
        "latent_amplitudes": [1.0, 1.0, 1.0, 1.0],
        "noise_sigma": 0.05,
        "test_fraction": 1.0 / 7.0,
        "pose_jitter_deg": 5.0,
        "pose_jitter_mm": 5.0,
        "rv_intensity": 0.1,
        "metadata_noise": 1.0,
        "lax_contours": True,
    },
    "cpd": {
        "kernel_width": 2.0,
        "regularization_weight": 3.0,
        "outlier_weight": 0.1,
        "max_iter": 150,
        "sigma_tol": 1e-8,
    },
    "pdm": {
        "variance_fraction": 0.997,
        "beta": 3.0,
        "max_modes": 28,
        "reference": "registered",  # or "ground_truth": the phantom meshes
    },
    "architecture": {
        "sax_depth": 4,
        "lax_depth": 2,
        "sax_filters": 4,
        "lax_filters": 4,
        "sax_feature_size": 1024,
        "lax_feature_size": 256,
        "mlp_hidden": [16, 32, 64],
        "mlp_output": 128,
        "head_hidden": [256, 128, 64],
        "use_metadata": True,
    },
    "train": {
        "learning_rate": 1e-3,
        "batch_size": 10,
        "iterations": 2000,
        "checkpoint_every": 1000,
    },
    "metrics": {"voxel_mm": 1.0, "reference": "registered"},
}

STAGE_OUTPUT = {
    "gen-synthetic": "dataset",
    "register": "registered",
    "build-pdm": "model",
    "train": "model",
    "predict": "predictions",
    "evaluate": "report",
    "verify": "report",
}


class UsageError(Exception):
    """Bad flags or configuration (exit code 2)."""


class StageError(Exception):
    """Missing inputs or failed validation (exit code 1)."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise UsageError(f"unknown configuration key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"configuration key {where}{key!r} must be a mapping")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"malformed config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must be a mapping at top level")
    return _merge(DEFAULT_CONFIG, raw)


def resolve_config(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    if args.out is not None:
        cfg["paths"][STAGE_OUTPUT[args.command]] = args.out
    if getattr(args, "voxel_mm", None) is not None:
        cfg["metrics"]["voxel_mm"] = args.voxel_mm
    if int(cfg["threads"]) < 1:
        raise UsageError("threads must be >= 1")
    for choice_key in ("pdm", "metrics"):
        if cfg[choice_key]["reference"] not in ("registered", "ground_truth"):
            raise UsageError(f"{choice_key}.reference must be 'registered' or 'ground_truth'")
    return cfg


@contextmanager
def ordered_map(threads: int):
    """Order-preserving map over a thread pool (plain ``map`` for one thread)."""
    if threads <= 1:
        yield map
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            yield pool.map


def _path(cfg, key) -> Path:
    return Path(cfg["paths"][key])


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {what}: {path}")
    return path


def _subjects(cfg, split=None) -> list[str]:
    root = _path(cfg, "dataset")
    _require(root / "manifest.csv", "dataset manifest")
    return [sid for sid, sp in read_manifest(root) if split is None or sp == split]


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def cmd_gen_synthetic(cfg) -> int:
    pc = PhantomConfig(seed=int(cfg["seed"]), **cfg["synthetic"])
    with ordered_map(int(cfg["threads"])) as pmap:
        ids = generate_cohort(pc, _path(cfg, "dataset"), pmap)
    log.info("wrote %d subjects to %s", len(ids), _path(cfg, "dataset"))
    return 0


def cmd_register(cfg) -> int:
    root = _path(cfg, "dataset")
    template = read_shape(_require(root / "template.ply", "template mesh"))
    cpd_cfg = CpdConfig(**cfg["cpd"])
    out = _path(cfg, "registered")
    out.mkdir(parents=True, exist_ok=True)
    ids = _subjects(cfg)

    def work(sid):
        contours = read_contours(_require(root / "subjects" / sid / "contours.csv", f"contours of {sid}"))
        write_shape(out / f"{sid}.ply", fit_template_to_contours(template, contours, cpd_cfg))
        return sid

    with ordered_map(int(cfg["threads"])) as pmap:
        for sid in pmap(work, ids):
            log.info("registered %s", sid)
    return 0


def _reference_shape(cfg, sid, which: str):
    if which == "ground_truth":
        return read_shape(_require(_path(cfg, "dataset") / "subjects" / sid / "shape.ply", f"mesh of {sid}"))
    return read_shape(_require(_path(cfg, "registered") / f"{sid}.ply", f"registered mesh of {sid}"))


def cmd_build_pdm(cfg) -> int:
    pc = cfg["pdm"]
    train_ids = _subjects(cfg, "train")
    all_ids = _subjects(cfg)
    shapes = {sid: _reference_shape(cfg, sid, pc["reference"]) for sid in all_ids}
    topo = shapes[train_ids[0]]
    gpa = generalized_procrustes([to_shape_vector(shapes[s]) for s in train_ids], with_scale=False)
    model = pdm_mod.build_pdm(
        gpa.aligned, pc["variance_fraction"], pc["beta"], max_modes=pc["max_modes"], topology=topo
    )
    _, _, spectrum = pdm_mod.pca_spectrum(gpa.aligned)
    out = _path(cfg, "model")
    out.mkdir(parents=True, exist_ok=True)
    pdm_mod.save_pdm(out / "pdm.pdm1", model)
    write_shape(out / "mean_shape.ply", from_shape_vector(model.mean, topo))

    cumulative = np.cumsum(spectrum) / spectrum.sum()
    with open(out / "variance.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["mode", "eigenvalue", "cumulative_fraction"])
        for i, (lam, c) in enumerate(zip(spectrum, cumulative), start=1):
            wr.writerow([i, f"{lam:.17g}", f"{c:.17g}"])
    print("mode  eigenvalue  cumulative")
    for i, (lam, c) in enumerate(zip(spectrum[: model.n_modes + 2], cumulative), start=1):
        print(f"{i:4d}  {lam:10.4g}  {c:10.6f}")
    print(f"k = {model.n_modes}")

    with open(out / "reference_params.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["subject_id"] + [f"b{i}" for i in range(1, model.n_modes + 1)])
        for sid in all_ids:
            if not same_shape_topology(shapes[sid], topo):
                raise StageError(f"{sid}: reference mesh topology differs from the cohort's")
            b = pdm_mod.clamp(model, pdm_mod.project(model, align(to_shape_vector(shapes[sid]), model.mean)))
            wr.writerow([sid] + [f"{v:.17g}" for v in pdm_mod.encode_unit(model, b)])
    log.info("PDM with %d modes from %d training shapes", model.n_modes, len(train_ids))
    return 0


def _read_reference_params(cfg) -> dict[str, np.ndarray]:
    path = _require(_path(cfg, "model") / "reference_params.csv", "reference parameters (run build-pdm)")
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        next(rd)
        return {row[0]: np.array([float(v) for v in row[1:]]) for row in rd}


def _load_inputs(cfg, ids, bounds: MetadataBounds, refs=None) -> TrainingData:
    root = _path(cfg, "dataset") / "subjects"
    sax, lax, meta, ref = [], [], [], []
    for sid in ids:
        d = root / sid
        sax.append(read_tensor(_require(d / "sax.tnsr", f"SAX stack of {sid}")))
        lax.append(read_tensor(_require(d / "lax.tnsr", f"LAX image of {sid}")))
        meta.append(encode_metadata(read_metadata_csv(d / "metadata.csv")[0], bounds))
        if refs is not None:
            ref.append(refs[sid])
    return TrainingData(
        np.asarray(sax, np.float32),
        np.asarray(lax, np.float32)[:, None],
        np.asarray(meta, np.float32),
        np.asarray(ref, np.float32) if refs is not None else None,
    )


def cmd_train(cfg) -> int:
    ids = _subjects(cfg, "train")
    refs = _read_reference_params(cfg)
    root = _path(cfg, "dataset") / "subjects"
    bounds = MetadataBounds.fit([read_metadata_csv(root / sid / "metadata.csv")[0] for sid in ids])
    data = _load_inputs(cfg, ids, bounds, refs)
    arch = ArchitectureConfig(k=data.reference.shape[1], **cfg["architecture"])
    tc = TrainConfig(seed=int(cfg["seed"]), **cfg["train"])
    out = _path(cfg, "model")
    meta = {"metadata_bounds": bounds.to_dict()}

    def progress(it, loss):
        if it % 100 == 0 or it == tc.iterations:
            log.info("iteration %d loss %.5f", it, loss)

    result = train(data, arch, tc, out / "checkpoints", meta, progress)
    result.net.save(out / "network.nnet", {**meta, "iteration": tc.iterations, "train": tc.__dict__})
    log.info("trained %d iterations in %.1f s", tc.iterations, result.seconds)
    return 0


def cmd_predict(cfg, checkpoint=None) -> int:
    ckpt = Path(checkpoint) if checkpoint else _path(cfg, "model") / "network.nnet"
    net, meta = ShapeNet.load(_require(ckpt, "network checkpoint"))
    model = pdm_mod.load_pdm(_require(_path(cfg, "model") / "pdm.pdm1", "PDM (run build-pdm)"))
    ids = _subjects(cfg, "test")
    data = _load_inputs(cfg, ids, MetadataBounds.from_dict(meta["metadata_bounds"]))
    unit = predict_unit(net, data)
    out = _path(cfg, "predictions")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predicted_params.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["subject_id"] + [f"b{i}" for i in range(1, unit.shape[1] + 1)])
        for sid, u in zip(ids, unit):
            wr.writerow([sid] + [f"{v:.17g}" for v in u])
            write_shape(out / f"{sid}.ply", unit_to_shape(u, model))
    log.info("predicted %d test subjects", len(ids))
    return 0


def cmd_evaluate(cfg) -> int:
    ids = _subjects(cfg, "test")
    pred_dir = _path(cfg, "predictions")
    pairs, problems = [], []
    for sid in ids:
        pred = read_shape(_require(pred_dir / f"{sid}.ply", f"prediction of {sid}"))
        ref = _reference_shape(cfg, sid, cfg["metrics"]["reference"])
        if not same_shape_topology(pred, ref):
            problems.append(
                f"{sid}: predicted LV/RV {pred.lv.n_vertices}/{pred.rv.n_vertices} vertices, "
                f"reference {ref.lv.n_vertices}/{ref.rv.n_vertices}"
            )
        pairs.append((sid, pred, ref))
    if problems:
        for p in problems:
            log.error("topology mismatch %s", p)
        raise StageError(f"{len(problems)} subjects have mismatched topology")
    with ordered_map(int(cfg["threads"])) as pmap:
        report = evaluate_cohort(pairs, float(cfg["metrics"]["voxel_mm"]), pmap)
    out = _path(cfg, "report")
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")
    mean, sd = report.mean(), report.sd()
    for key in ("dice_lv_endo", "dice_lv_epi", "dice_rv", "msd_lv_endo", "msd_lv_epi", "msd_rv"):
        log.info("%s %.3f +- %.3f", key, mean[key], sd[key])
    return 0


def cmd_verify(cfg) -> int:
    from .verify import run_all

    results = run_all(seed=int(cfg["seed"]))
    out = _path(cfg, "report")
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name}  {r.detail}" for r in results]
    (out / "verify.txt").write_text("\n".join(lines) + "\n")
    for line, r in zip(lines, results):
        print(line)
        log.info("%s took %.2f s", r.name, r.seconds)
    failed = [r for r in results if not r.passed]
    if failed:
        raise StageError(f"{len(failed)} of {len(results)} oracle checks failed")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML configuration file")
    common.add_argument("--seed", type=int, help="global seed (cohort, initialisation, shuffling)")
    common.add_argument("--threads", type=int, help="subject-level worker threads (default 1)")
    common.add_argument("--out", metavar="DIR", help="output directory of this stage")

    parser = argparse.ArgumentParser(prog="cardioshape", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic phantom cohort")
    sub.add_parser("register", parents=[common], help="fit the template to every subject's contours")
    sub.add_parser("build-pdm", parents=[common], help="align training references and build the PDM")
    sub.add_parser("train", parents=[common], help="train the shape-parameter network")
    p = sub.add_parser("predict", parents=[common], help="predict test-subject meshes")
    p.add_argument("--checkpoint", metavar="PATH", help="network checkpoint (default: model/network.nnet)")
    p = sub.add_parser("evaluate", parents=[common], help="score predictions against references")
    p.add_argument("--voxel-mm", type=float, help="voxel spacing for Dice (mm)")
    sub.add_parser("verify", parents=[common], help="run the oracle checks")
    return parser


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "register": cmd_register,
    "build-pdm": cmd_build_pdm,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(asctime)s %(levelname)s %(message)s")
    log.setLevel(logging.INFO)
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        log.info("resolved configuration:\n%s", yaml.safe_dump(cfg, sort_keys=True).rstrip())
        if args.command == "predict":
            return cmd_predict(cfg, args.checkpoint)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        log.error("%s", exc)
        return 2
    except (TypeError, ValueError) as exc:
        # configuration values outside module preconditions surface here
        log.error("%s", exc)
        return 1 if not isinstance(exc, TypeError) else 2
    except StageError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
