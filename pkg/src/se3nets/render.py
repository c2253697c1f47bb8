"""Point-cloud splatting to depth-coloured images and PPM output."""

import numpy as np

# Anchor colours for the depth map, near (index 0) to far.
_COLORMAP = np.array([
    [255, 244, 160],
    [250, 160, 60],
    [220, 70, 60],
    [140, 30, 110],
    [50, 20, 120],
], dtype=np.float64)


def depth_colormap(t):
    """Map ``t`` in [0, 1] to RGB bytes by piecewise-linear interpolation."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0) * (len(_COLORMAP) - 1)
    lo = np.minimum(np.floor(t).astype(np.int64), len(_COLORMAP) - 2)
    frac = (t - lo)[..., None]
    rgb = _COLORMAP[lo] * (1.0 - frac) + _COLORMAP[lo + 1] * frac
    return np.round(rgb).astype(np.uint8)


def splat(cloud, camera, valid=None):
    """Z-buffered nearest-pixel projection.

    Returns the per-pixel depth (``inf`` where nothing landed) and the flat
    source index of the winning point (``-1`` where empty).
    """
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    keep = np.isfinite(pts).all(axis=1) & (pts[:, 2] > 0)
    if valid is not None:
        keep &= np.asarray(valid, dtype=bool).reshape(-1)
    row, col, z = camera.project(pts)
    ri = np.floor(np.where(keep, row, -1.0) + 0.5).astype(np.int64)
    ci = np.floor(np.where(keep, col, -1.0) + 0.5).astype(np.int64)
    keep &= (ri >= 0) & (ri < camera.height) & (ci >= 0) & (ci < camera.width)
    src = np.flatnonzero(keep)
    depth = np.full(camera.height * camera.width, np.inf)
    winner = np.full(camera.height * camera.width, -1, dtype=np.int64)
    if len(src):
        pix = ri[src] * camera.width + ci[src]
        # nearest point first; ties keep the lower source index
        order = np.lexsort((src, z[src], pix))
        pix_sorted = pix[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix_sorted[1:] != pix_sorted[:-1]
        chosen = src[order[first]]
        depth[pix_sorted[first]] = z[chosen]
        winner[pix_sorted[first]] = chosen
    return depth.reshape(camera.height, camera.width), winner.reshape(camera.height, camera.width)


def render_cloud(cloud, camera, valid=None, depth_range=None):
    """RGB ``uint8`` image of a camera-frame cloud; pixels no point reaches stay black."""
    depth, _ = splat(cloud, camera, valid)
    hit = np.isfinite(depth)
    image = np.zeros(depth.shape + (3,), dtype=np.uint8)
    if not hit.any():
        return image
    lo, hi = depth_range if depth_range is not None else (depth[hit].min(), depth[hit].max())
    span = hi - lo if hi > lo else 1.0
    image[hit] = depth_colormap((depth[hit] - lo) / span)
    return image


def write_ppm(path, image):
    """Binary PPM (P6)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("expected an (H, W, 3) uint8 image")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError(f"{path}: truncated PPM header")
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw, dtype=np.uint8, offset=pos + 1)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: pixel data size mismatch")
    return data.reshape(h, w, 3)
