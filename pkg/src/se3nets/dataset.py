"""Frame collections and their on-disk format.

A dataset directory holds ``manifest.json`` and ``frames.bin``. For each
frame, in order, ``frames.bin`` stores (little endian):

    X   H*W*3 float64   input cloud, row-major (row, col, xyz)
    u   n float64       action
    Y'  H*W*3 float64   target cloud, index-aligned with X
    L   H*W uint8       motion labels (0 = background)
    V   H*W uint8       validity (1 = surface hit)
    m   uint8           number of transform entries
    T   m*6 float64     per-label axis-angle (3) + translation (3)
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .scene import Frame, SceneSpec, add_depth_noise, corrupt_associations, generate_frame

FORMAT_VERSION = 1
DEFAULT_SPLIT = 0.7
REFERENCE_DEPTH = 1.0


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    manifest: dict
    frames: list = field(default_factory=list)

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def height(self):
        return self.manifest["H"]

    @property
    def width(self):
        return self.manifest["W"]

    @property
    def n(self):
        return self.manifest["n"]

    def subset(self, indices):
        manifest = dict(self.manifest)
        frames = [self.frames[i] for i in indices]
        manifest["frame_count"] = len(frames)
        return Dataset(manifest, frames)

    def split(self, fraction=DEFAULT_SPLIT):
        """Leading ``fraction`` of frames for training, the rest for testing."""
        cut = int(round(fraction * len(self.frames)))
        return self.subset(range(cut)), self.subset(range(cut, len(self.frames)))

    def arrays(self, indices=None):
        """Stacked network-layout arrays: clouds/targets ``(N, 3, H, W)``, actions, labels, validity."""
        frames = self.frames if indices is None else [self.frames[i] for i in indices]
        x = np.stack([f.cloud for f in frames]).transpose(0, 3, 1, 2)
        y = np.stack([f.target for f in frames]).transpose(0, 3, 1, 2)
        u = np.stack([f.action for f in frames])
        labels = np.stack([f.labels for f in frames])
        valid = np.stack([f.valid for f in frames])
        return np.ascontiguousarray(x), u, np.ascontiguousarray(y), labels, valid


def _noise_config(depth_sd=0.0, depth_scaled=False, assoc_window=1, assoc_thresh=0.0):
    return {"depth_sd": float(depth_sd), "depth_scaled": bool(depth_scaled), "reference_depth": REFERENCE_DEPTH,
            "assoc_window": int(assoc_window), "assoc_thresh": float(assoc_thresh)}


def generate_dataset(family="push", frames=100, seed=0, height=32, width=40, spec=None):
    """Clean frames; frame ``i`` draws from a generator seeded with ``(seed, i)``."""
    spec = spec or SceneSpec(family=family, height=height, width=width)
    out = [generate_frame(spec, np.random.default_rng([seed, i])) for i in range(frames)]
    manifest = {
        "version": FORMAT_VERSION,
        "family": spec.family,
        "H": spec.height,
        "W": spec.width,
        "n": spec.n,
        "k_true_max": spec.k_true_max,
        "frame_count": frames,
        "noise": _noise_config(),
        "seed": seed,
        "scale_divisor": 1.0,
        "alpha": spec.alpha,
        "beta": spec.beta,
        "generator": spec.constants(),
        "camera": spec.camera.to_dict(),
    }
    return Dataset(manifest, out)


def apply_noise(dataset, depth_sd=0.0, depth_scaled=False, assoc_window=1, assoc_thresh=0.0, seed=None):
    """Corrupt every frame; per-frame noise streams derive from ``(seed, index)``."""
    seed = dataset.manifest["seed"] if seed is None else seed
    frames = []
    for i, f in enumerate(dataset.frames):
        if depth_sd > 0:
            f = add_depth_noise(f, depth_sd, depth_scaled, seed=[seed, i, 1], reference_depth=REFERENCE_DEPTH)
        if assoc_window > 1:
            f = corrupt_associations(f, assoc_window, assoc_thresh, seed=[seed, i, 2])
        frames.append(f)
    manifest = dict(dataset.manifest)
    manifest["noise"] = _noise_config(depth_sd, depth_scaled, assoc_window, assoc_thresh)
    return Dataset(manifest, frames)


# -------------------------------------------------------------------- I/O


def write_dataset(dataset, directory):
    os.makedirs(directory, exist_ok=True)
    manifest = dict(dataset.manifest)
    manifest["frame_count"] = len(dataset.frames)
    h, w, n = manifest["H"], manifest["W"], manifest["n"]
    with open(os.path.join(directory, "frames.bin"), "wb") as fh:
        for f in dataset.frames:
            if f.cloud.shape != (h, w, 3) or f.action.shape != (n,):
                raise DatasetError("frame shapes do not match the manifest")
            fh.write(f.cloud.astype("<f8").tobytes())
            fh.write(f.action.astype("<f8").tobytes())
            fh.write(f.target.astype("<f8").tobytes())
            fh.write(f.labels.astype(np.uint8).tobytes())
            fh.write(f.valid.astype(np.uint8).tobytes())
            fh.write(bytes([len(f.transforms)]))
            fh.write(np.asarray(f.transforms, dtype="<f8").tobytes())
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


_REQUIRED_KEYS = ("version", "family", "H", "W", "n", "k_true_max", "frame_count", "noise", "seed",
                  "scale_divisor", "alpha", "beta")


def read_dataset(directory):
    manifest_path = os.path.join(directory, "manifest.json")
    frames_path = os.path.join(directory, "frames.bin")
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise DatasetError(f"{directory}: missing manifest.json") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}: malformed JSON ({exc})") from exc
    missing = [k for k in _REQUIRED_KEYS if k not in manifest]
    if missing:
        raise DatasetError(f"{manifest_path}: missing keys {missing}")
    if manifest["version"] != FORMAT_VERSION:
        raise DatasetError(f"{manifest_path}: unsupported version {manifest['version']}")
    try:
        with open(frames_path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError as exc:
        raise DatasetError(f"{directory}: missing frames.bin") from exc

    h, w, n = manifest["H"], manifest["W"], manifest["n"]
    pix = h * w
    frames = []
    pos = 0

    def take(count, dtype):
        nonlocal pos
        size = count * np.dtype(dtype).itemsize
        if pos + size > len(raw):
            raise DatasetError(f"{frames_path}: truncated in frame {len(frames)} (offset {pos})")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
        pos += size
        return arr

    while pos < len(raw):
        cloud = take(pix * 3, "<f8").reshape(h, w, 3).astype(np.float64)
        action = take(n, "<f8").astype(np.float64)
        target = take(pix * 3, "<f8").reshape(h, w, 3).astype(np.float64)
        labels = take(pix, np.uint8).reshape(h, w).copy()
        valid = take(pix, np.uint8).reshape(h, w).astype(bool)
        m = int(take(1, np.uint8)[0])
        transforms = take(m * 6, "<f8").reshape(m, 6).astype(np.float64)
        frames.append(Frame(cloud, action, target, labels, valid, transforms))
    if len(frames) != manifest["frame_count"]:
        raise DatasetError(f"{directory}: manifest lists {manifest['frame_count']} frames, file holds {len(frames)}")
    return Dataset(manifest, frames)
