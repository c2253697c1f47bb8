"""Comparison protocols: baselines, noise robustness and the choice of k.

Every protocol trains on the (possibly corrupted) training split and scores
on the clean test split, so the moving-point set and the ground-truth flow
are the same for every condition.
"""

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .dataset import apply_noise, generate_dataset
from .metrics import FLOW_MSE_DEFINITION
from .model import load_checkpoint, save_checkpoint
from .render import render_cloud, write_ppm
from .scene import Camera
from .train import MetricsReport, TrainConfig, predict, train

log = logging.getLogger(__name__)

EXPERIMENTS = ("baseline_comparison", "depth_noise", "association_noise", "k_sensitivity")

# label -> (model variant, training loss)
VARIANT_LABELS = {
    "se3net": ("se3net", "all_points"),
    "se3net_no_penalty": ("se3net_no_penalty", "all_points"),
    "flow": ("flow", "all_points"),
    "flow_moving_points": ("flow", "moving_points"),
    "no_motion": ("no_motion", "all_points"),
}

CLEAN = {}
DEPTH_CONDITIONS = {
    "clean": CLEAN,
    "depth_sd0.0075_scaled": {"depth_sd": 0.0075, "depth_scaled": True},
    "depth_sd0.015_unscaled": {"depth_sd": 0.015, "depth_scaled": False},
}
ASSOC_CONDITIONS = {
    "clean": CLEAN,
    "assoc_9x9_0.10": {"assoc_window": 9, "assoc_thresh": 0.10},
    # same surface footprint as 9x9 at 8x the resolution
    "assoc_3x3_0.10": {"assoc_window": 3, "assoc_thresh": 0.10},
    "assoc_15x15_0.20": {"assoc_window": 15, "assoc_thresh": 0.20},
}

CSV_FIELDS = ("experiment", "condition", "variant", "k", "loss_mode", "flow_mse_cm", "moving_points",
              "degradation", "mask_entropy", "seg_accuracy", "occupancy", "transform_deviation", "train_seconds")


class ExperimentError(ValueError):
    pass


@dataclass
class Protocol:
    variants: tuple
    conditions: dict                 # name -> noise keyword arguments
    ks: dict = field(default_factory=dict)   # condition -> k override


def protocol(name):
    if name == "baseline_comparison":
        return Protocol(("se3net", "se3net_no_penalty", "flow", "flow_moving_points", "no_motion"),
                        {"clean": CLEAN})
    if name == "depth_noise":
        return Protocol(("se3net", "flow"), dict(DEPTH_CONDITIONS))
    if name == "association_noise":
        return Protocol(("se3net", "flow"), dict(ASSOC_CONDITIONS))
    if name == "k_sensitivity":
        return Protocol(("se3net",), {"k3": CLEAN, "k6": CLEAN}, {"k3": 3, "k6": 6})
    raise ExperimentError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")


def dataset_fingerprint(dataset):
    h = hashlib.sha1(json.dumps(dataset.manifest, sort_keys=True, default=str).encode("utf-8"))
    for f in dataset.frames:
        h.update(f.cloud.tobytes())
        h.update(f.action.tobytes())
        h.update(f.target.tobytes())
    return h.hexdigest()[:16]


class RunCache:
    """Trained runs keyed by data, variant, k, loss, noise and training settings.

    With a ``directory`` the checkpoints and reports persist across processes.
    """

    def __init__(self, directory=None):
        self.directory = directory
        self._runs = {}
        if directory:
            os.makedirs(directory, exist_ok=True)

    @staticmethod
    def key(fingerprint, cfg, noise):
        blob = json.dumps({"data": fingerprint, "variant": cfg.variant, "k": cfg.k, "loss": cfg.loss_mode,
                           "epochs": cfg.epochs, "seed": cfg.seed, "batch": cfg.batch_size, "lr": cfg.lr,
                           "noise": noise, "overrides": cfg.model_overrides}, sort_keys=True)
        return hashlib.sha1(blob.encode("utf-8")).hexdigest()[:20]

    def get(self, key):
        if key in self._runs:
            return self._runs[key]
        if self.directory:
            ckpt = os.path.join(self.directory, key + ".ckpt")
            meta = os.path.join(self.directory, key + ".json")
            if os.path.exists(ckpt) and os.path.exists(meta):
                model, _ = load_checkpoint(ckpt)
                with open(meta, encoding="utf-8") as fh:
                    report = MetricsReport(**json.load(fh))
                self._runs[key] = (model, report)
                return self._runs[key]
        return None

    def put(self, key, model, report):
        self._runs[key] = (model, report)
        if self.directory:
            save_checkpoint(os.path.join(self.directory, key + ".ckpt"), model)
            with open(os.path.join(self.directory, key + ".json"), "w", encoding="utf-8") as fh:
                json.dump(report.__dict__, fh)


def train_run(train_set, test_set, variant_label, k=3, noise=None, epochs=60, seed=0, cache=None,
              fingerprint=None, **overrides):
    """Train (or fetch from ``cache``) one variant and return ``(model, report)``."""
    if variant_label not in VARIANT_LABELS:
        raise ExperimentError(f"unknown variant {variant_label!r}")
    variant, loss_mode = VARIANT_LABELS[variant_label]
    noise = dict(noise or {})
    cfg = TrainConfig(variant=variant, k=k, epochs=epochs, seed=seed, loss_mode=loss_mode, **overrides)
    key = None
    if cache is not None:
        key = RunCache.key(fingerprint or dataset_fingerprint(train_set), cfg, noise)
        hit = cache.get(key)
        if hit is not None:
            return hit
    data = apply_noise(train_set, seed=seed, **noise) if noise else train_set
    result = train(cfg, dataset=data, test=test_set)
    result.report.train_seconds = result.seconds
    if cache is not None:
        cache.put(key, result.model, result.report)
    return result.model, result.report


@dataclass
class ExperimentResult:
    name: str
    rows: list
    csv_path: str = None
    images: list = field(default_factory=list)
    runs: dict = field(default_factory=dict)     # (condition, variant) -> (model, report)


def _fmt_list(values):
    return ";".join(f"{v:.6g}" for v in values)


def write_table(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {FLOW_MSE_DEFINITION}\n")
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            out["occupancy"] = _fmt_list(row.get("occupancy") or [])
            out["transform_deviation"] = _fmt_list(row.get("transform_deviation") or [])
            writer.writerow({k: out.get(k, "") for k in CSV_FIELDS})


def read_table(path):
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def _render_samples(out_dir, tag, model, test_set, frame_index=0):
    camera = Camera.from_dict(test_set.manifest["camera"])
    frame = test_set[frame_index]
    x, u, _, _, _ = test_set.arrays([frame_index])
    pred = predict(model, x, u)[0]
    cloud = pred.cloud.data[0].transpose(1, 2, 0)
    depth = frame.cloud[frame.valid][:, 2]
    rng = (float(depth.min()), float(depth.max())) if depth.size else None
    paths = []
    for suffix, pts in (("input", frame.cloud), ("target", frame.target), ("pred", cloud)):
        path = os.path.join(out_dir, f"{tag}_{suffix}.ppm")
        write_ppm(path, render_cloud(pts, camera, frame.valid, rng))
        paths.append(path)
    if pred.masks is not None and pred.masks.shape[1] <= 3:
        m = pred.masks.data[0]
        rgb = np.zeros(m.shape[1:] + (3,))
        rgb[..., :m.shape[0]] = m.transpose(1, 2, 0)
        path = os.path.join(out_dir, f"{tag}_masks.ppm")
        write_ppm(path, np.round(rgb * 255 * frame.valid[..., None]).astype(np.uint8))
        paths.append(path)
    return paths


def run_experiment(name, out_dir, dataset=None, frames=2000, seed=0, epochs=60, conditions=None, variants=None,
                   cache=None, split=0.7, render=True):
    """Run protocol ``name`` and write ``<out_dir>/<name>.csv`` plus sample PPM images.

    ``conditions`` / ``variants`` restrict the protocol to a subset; the
    clean-run reference for ``degradation`` is trained when available.
    """
    proto = protocol(name)
    conds = proto.conditions if conditions is None else {c: proto.conditions[c] for c in conditions
                                                        if _known(c, proto.conditions)}
    labels = proto.variants if variants is None else tuple(v for v in variants if _known(v, proto.variants))
    os.makedirs(out_dir, exist_ok=True)
    if dataset is None:
        dataset = generate_dataset("push", frames=frames, seed=seed)
    train_set, test_set = dataset.split(split)
    fingerprint = dataset_fingerprint(train_set)
    cache = cache if cache is not None else RunCache()
    result = ExperimentResult(name, [])
    for cond, noise in conds.items():
        k = proto.ks.get(cond, 3)
        for label in labels:
            log.info("%s: training %s under %s", name, label, cond)
            model, report = train_run(train_set, test_set, label, k=k, noise=noise, epochs=epochs, seed=seed,
                                      cache=cache, fingerprint=fingerprint)
            result.runs[(cond, label)] = (model, report)
            result.rows.append({
                "experiment": name, "condition": cond, "variant": label, "k": k,
                "loss_mode": VARIANT_LABELS[label][1], "flow_mse_cm": report.flow_mse_cm,
                "moving_points": report.moving_points, "mask_entropy": report.mask_entropy,
                "seg_accuracy": report.seg_accuracy, "occupancy": report.occupancy,
                "transform_deviation": report.transform_deviation,
                "train_seconds": report.train_seconds,
            })
            if render:
                result.images += _render_samples(out_dir, f"{name}_{cond}_{label}", model, test_set)
    clean = {r["variant"]: r["flow_mse_cm"] for r in result.rows if r["condition"] == "clean"}
    for row in result.rows:
        ref = clean.get(row["variant"])
        row["degradation"] = row["flow_mse_cm"] / ref if ref else ""
    result.csv_path = os.path.join(out_dir, f"{name}.csv")
    write_table(result.csv_path, result.rows)
    if name == "k_sensitivity":
        _write_channels(os.path.join(out_dir, "k_sensitivity_channels.csv"), result.rows)
    return result


def _known(item, allowed):
    if item not in allowed:
        raise ExperimentError(f"{item!r} is not part of this protocol (choose from {', '.join(allowed)})")
    return True


def _write_channels(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["condition", "k", "channel", "occupancy", "transform_deviation"])
        for row in rows:
            for c, (occ, dev) in enumerate(zip(row["occupancy"], row["transform_deviation"])):
                writer.writerow([row["condition"], row["k"], c, f"{occ:.6g}", f"{dev:.6g}"])
