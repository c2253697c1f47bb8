"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The public names (``conv2d_forward``, ``raycast`` ...) dispatch on
:mod:`se3nets._accel` (env flag ``SE3NETS_BACKEND``). Both implementations stay importable as
``*_numba`` / ``*_numpy`` so they can be cross-checked and benchmarked.

All convolution kernels work on 4-D arrays ``(N, C, H, W)`` and carry no bias.
"""

import numpy as np

from ._accel import USE_NUMBA, USE_NUMBA_CONV, njit

PRIM_PLANE = 0
PRIM_BOX = 1
PRIM_SPHERE = 2
PRIM_WIDTH = 12


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


# --------------------------------------------------------------------- conv


@njit
def conv2d_forward_numba(x, w, stride, pad):
    n_batch, n_in, h, wd = x.shape
    n_out, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n_batch, n_out, ho, wo))
    for n in range(n_batch):
        for f in range(n_out):
            for c in range(n_in):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[f, c, i, j]
                        for oh in range(ho):
                            ih = oh * stride - pad + i
                            if ih < 0 or ih >= h:
                                continue
                            for ow in range(wo):
                                iw = ow * stride - pad + j
                                if 0 <= iw < wd:
                                    out[n, f, oh, ow] += wv * x[n, c, ih, iw]
    return out


@njit
def conv2d_backward_input_numba(gout, w, h, wd, stride, pad):
    n_batch, n_out, ho, wo = gout.shape
    _, n_in, kh, kw = w.shape
    gx = np.zeros((n_batch, n_in, h, wd))
    for n in range(n_batch):
        for f in range(n_out):
            for c in range(n_in):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[f, c, i, j]
                        for oh in range(ho):
                            ih = oh * stride - pad + i
                            if ih < 0 or ih >= h:
                                continue
                            for ow in range(wo):
                                iw = ow * stride - pad + j
                                if 0 <= iw < wd:
                                    gx[n, c, ih, iw] += wv * gout[n, f, oh, ow]
    return gx


@njit
def conv2d_backward_weight_numba(x, gout, kh, kw, stride, pad):
    n_batch, n_in, h, wd = x.shape
    _, n_out, ho, wo = gout.shape
    gw = np.zeros((n_out, n_in, kh, kw))
    for f in range(n_out):
        for c in range(n_in):
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    for n in range(n_batch):
                        for oh in range(ho):
                            ih = oh * stride - pad + i
                            if ih < 0 or ih >= h:
                                continue
                            for ow in range(wo):
                                iw = ow * stride - pad + j
                                if iw < 0 or iw >= wd:
                                    continue
                                acc += gout[n, f, oh, ow] * x[n, c, ih, iw]
                    gw[f, c, i, j] = acc
    return gw


def _im2col(x, kh, kw, stride, pad):
    """Patches as a ``(N*Ho*Wo, C*kh*kw)`` matrix."""
    n_batch, n_in, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    win = win[:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n_batch * ho * wo, n_in * kh * kw)
    return cols, ho, wo


def conv2d_forward_numpy(x, w, stride, pad):
    n_batch = x.shape[0]
    n_out, n_in, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    out = cols @ w.reshape(n_out, -1).T
    return np.ascontiguousarray(out.reshape(n_batch, ho, wo, n_out).transpose(0, 3, 1, 2))


def conv2d_backward_input_numpy(gout, w, h, wd, stride, pad):
    n_batch, n_out, ho, wo = gout.shape
    _, n_in, kh, kw = w.shape
    g2 = gout.transpose(0, 2, 3, 1).reshape(-1, n_out)
    dcols = (g2 @ w.reshape(n_out, -1)).reshape(n_batch, ho, wo, n_in, kh, kw)
    gxp = np.zeros((n_batch, n_in, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd])


def conv2d_backward_weight_numpy(x, gout, kh, kw, stride, pad):
    n_out = gout.shape[1]
    n_in = x.shape[1]
    cols, _, _ = _im2col(x, kh, kw, stride, pad)
    g2 = gout.transpose(0, 2, 3, 1).reshape(-1, n_out)
    return (g2.T @ cols).reshape(n_out, n_in, kh, kw)


# ----------------------------------------------------------------- ray cast


@njit
def raycast_numba(origin, dirs, prims):
    n_rays = dirs.shape[0]
    depth = np.full(n_rays, np.inf)
    ids = np.full(n_rays, -1, dtype=np.int64)
    for r in range(n_rays):
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        best = np.inf
        best_id = -1
        for p in range(prims.shape[0]):
            kind = int(prims[p, 0])
            t = np.inf
            if kind == 0:
                if dz != 0.0:
                    tc = (prims[p, 2] - origin[2]) / dz
                    if tc > 0.0:
                        hx = origin[0] + tc * dx
                        hy = origin[1] + tc * dy
                        if prims[p, 3] <= hx <= prims[p, 4] and prims[p, 5] <= hy <= prims[p, 6]:
                            t = tc
            elif kind == 1:
                c = np.cos(prims[p, 5])
                s = np.sin(prims[p, 5])
                ox = origin[0] - prims[p, 2]
                oy = origin[1] - prims[p, 3]
                oz = origin[2] - prims[p, 4]
                lo = np.array([c * ox + s * oy, -s * ox + c * oy, oz])
                ld = np.array([c * dx + s * dy, -s * dx + c * dy, dz])
                tmin = -np.inf
                tmax = np.inf
                hit = True
                for a in range(3):
                    half = prims[p, 6 + a]
                    if ld[a] == 0.0:
                        if abs(lo[a]) > half:
                            hit = False
                    else:
                        t1 = (-half - lo[a]) / ld[a]
                        t2 = (half - lo[a]) / ld[a]
                        if t1 > t2:
                            t1, t2 = t2, t1
                        tmin = max(tmin, t1)
                        tmax = min(tmax, t2)
                if hit and tmin <= tmax and tmin > 0.0:
                    t = tmin
            elif kind == 2:
                ox = origin[0] - prims[p, 2]
                oy = origin[1] - prims[p, 3]
                oz = origin[2] - prims[p, 4]
                rad = prims[p, 5]
                a2 = dx * dx + dy * dy + dz * dz
                b = ox * dx + oy * dy + oz * dz
                cc = ox * ox + oy * oy + oz * oz - rad * rad
                disc = b * b - a2 * cc
                if disc >= 0.0:
                    tc = (-b - np.sqrt(disc)) / a2
                    if tc > 0.0:
                        t = tc
            if t < best:
                best = t
                best_id = int(prims[p, 1])
        depth[r] = best
        ids[r] = best_id
    return depth, ids


def raycast_numpy(origin, dirs, prims):
    n_rays = dirs.shape[0]
    depth = np.full(n_rays, np.inf)
    ids = np.full(n_rays, -1, dtype=np.int64)
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        for p in range(prims.shape[0]):
            row = prims[p]
            kind = int(row[0])
            t = np.full(n_rays, np.inf)
            if kind == PRIM_PLANE:
                tc = (row[2] - origin[2]) / dz
                hx = origin[0] + tc * dx
                hy = origin[1] + tc * dy
                ok = (dz != 0) & (tc > 0) & (row[3] <= hx) & (hx <= row[4]) & (row[5] <= hy) & (hy <= row[6])
                t[ok] = tc[ok]
            elif kind == PRIM_BOX:
                c, s = np.cos(row[5]), np.sin(row[5])
                o = origin - row[2:5]
                lo = np.array([c * o[0] + s * o[1], -s * o[0] + c * o[1], o[2]])
                ld = np.stack([c * dx + s * dy, -s * dx + c * dy, dz])
                tmin = np.full(n_rays, -np.inf)
                tmax = np.full(n_rays, np.inf)
                hit = np.ones(n_rays, dtype=bool)
                for a in range(3):
                    half = row[6 + a]
                    par = ld[a] == 0
                    hit &= ~(par & (abs(lo[a]) > half))
                    t1 = (-half - lo[a]) / ld[a]
                    t2 = (half - lo[a]) / ld[a]
                    lo_t = np.where(par, -np.inf, np.minimum(t1, t2))
                    hi_t = np.where(par, np.inf, np.maximum(t1, t2))
                    tmin = np.maximum(tmin, lo_t)
                    tmax = np.minimum(tmax, hi_t)
                ok = hit & (tmin <= tmax) & (tmin > 0)
                t[ok] = tmin[ok]
            elif kind == PRIM_SPHERE:
                o = origin - row[2:5]
                a2 = dx * dx + dy * dy + dz * dz
                b = o[0] * dx + o[1] * dy + o[2] * dz
                cc = o @ o - row[5] * row[5]
                disc = b * b - a2 * cc
                tc = (-b - np.sqrt(np.maximum(disc, 0.0))) / a2
                ok = (disc >= 0) & (tc > 0)
                t[ok] = tc[ok]
            closer = t < depth
            depth[closer] = t[closer]
            ids[closer] = int(row[1])
    return depth, ids


# ------------------------------------------------------ association noise


@njit
def corrupt_associations_numba(depth, valid, target, uniforms, window, thresh):
    h, w = depth.shape
    half = window // 2
    out = target.copy()
    for r in range(h):
        for c in range(w):
            if not valid[r, c]:
                continue
            z = depth[r, c]
            count = 0
            for rr in range(max(0, r - half), min(h, r + half + 1)):
                for cc in range(max(0, c - half), min(w, c + half + 1)):
                    if valid[rr, cc] and abs(depth[rr, cc] - z) <= thresh:
                        count += 1
            pick = min(int(uniforms[r, c] * count), count - 1)
            seen = 0
            for rr in range(max(0, r - half), min(h, r + half + 1)):
                for cc in range(max(0, c - half), min(w, c + half + 1)):
                    if valid[rr, cc] and abs(depth[rr, cc] - z) <= thresh:
                        if seen == pick:
                            out[r, c, 0] = target[rr, cc, 0]
                            out[r, c, 1] = target[rr, cc, 1]
                            out[r, c, 2] = target[rr, cc, 2]
                        seen += 1
    return out


def corrupt_associations_numpy(depth, valid, target, uniforms, window, thresh):
    h, w = depth.shape
    half = window // 2
    rows, cols = np.mgrid[0:h, 0:w]
    offsets = [(dr, dc) for dr in range(-half, half + 1) for dc in range(-half, half + 1)]

    def candidate(dr, dc):
        rr, cc = rows + dr, cols + dc
        inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        rr_c, cc_c = np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)
        ok = inside & valid[rr_c, cc_c] & (np.abs(depth[rr_c, cc_c] - depth) <= thresh)
        return ok, rr_c, cc_c

    count = np.zeros((h, w), dtype=np.int64)
    for dr, dc in offsets:
        count += candidate(dr, dc)[0]
    pick = np.minimum((uniforms * count).astype(np.int64), count - 1)
    seen = np.zeros((h, w), dtype=np.int64)
    out = target.copy()
    for dr, dc in offsets:
        ok, rr_c, cc_c = candidate(dr, dc)
        chosen = ok & (seen == pick) & valid
        out[chosen] = target[rr_c[chosen], cc_c[chosen]]
        seen += ok
    return out


if USE_NUMBA_CONV:
    conv2d_forward = conv2d_forward_numba
    conv2d_backward_input = conv2d_backward_input_numba
    conv2d_backward_weight = conv2d_backward_weight_numba
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_backward_input = conv2d_backward_input_numpy
    conv2d_backward_weight = conv2d_backward_weight_numpy

if USE_NUMBA:
    raycast = raycast_numba
    corrupt_associations_kernel = corrupt_associations_numba
else:
    raycast = raycast_numpy
    corrupt_associations_kernel = corrupt_associations_numpy
