"""Pixel-grid hot kernels: numba-jitted fast path plus a numpy/scipy fallback.

The jitted path is used when numba imports cleanly; set IMATTE_DISABLE_NUMBA=1
to force the fallback. Both implementations are kept importable side by side
(`NUMPY_IMPLS`, `NUMBA_IMPLS`) so tests can assert they agree and
``benchmarks/bench_kernels.py`` can time them against each other.

Conventions: grids are row-major ``[y, x]``; point coordinates are ``(x, y)``
in pixel units with pixel centers at integer coordinates.
"""

from __future__ import annotations

import os

import numpy as np
import scipy.ndimage

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8)


def _disc_footprint_np(h, w, cx, cy, radius):
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius * radius


def _segment_distance_sq(px, py, ax, ay, bx, by):
    # squared distance from points (px, py) to segment (a, b), vectorized
    dx, dy = bx - ax, by - ay
    seg_len_sq = dx * dx + dy * dy
    if seg_len_sq == 0.0:
        return (px - ax) ** 2 + (py - ay) ** 2
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / seg_len_sq, 0.0, 1.0)
    qx, qy = ax + t * dx, ay + t * dy
    return (px - qx) ** 2 + (py - qy) ** 2


def _stroke_footprint_np(h, w, points, radius):
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    out = np.zeros((h, w), dtype=bool)
    r_sq = radius * radius
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 1:
        pts = np.vstack([pts, pts])
    for k in range(len(pts) - 1):
        d_sq = _segment_distance_sq(xs, ys, pts[k, 0], pts[k, 1], pts[k + 1, 0], pts[k + 1, 1])
        out |= d_sq <= r_sq
    return out


def _box_band_footprint_np(h, w, x1, y1, x2, y2, band):
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    # signed distance to the rectangle outline: negative inside, positive outside
    dx = np.maximum(np.maximum(x1 - xs, xs - x2), 0.0)
    dy = np.maximum(np.maximum(y1 - ys, ys - y2), 0.0)
    outside = np.sqrt(dx * dx + dy * dy)
    inside = np.minimum(np.minimum(xs - x1, x2 - xs), np.minimum(ys - y1, y2 - ys))
    dist = np.where((dx > 0) | (dy > 0), outside, np.maximum(inside, 0.0))
    return dist <= band


def _label_components_np(mask):
    labels, count = scipy.ndimage.label(mask, structure=_FOUR_CONNECTED)
    return labels.astype(np.int32), int(count)


def _convolve2d_nearest_np(img, kernel):
    return scipy.ndimage.convolve(np.asarray(img, dtype=np.float64),
                                  np.asarray(kernel, dtype=np.float64), mode="nearest")


def _onehot_area_pool_np(values, stride, n_values):
    h, w = values.shape
    oh = -(-h // stride)
    ow = -(-w // stride)
    onehot = np.zeros((h, w, n_values), dtype=np.float64)
    idx = np.clip(values, 0, n_values - 1).astype(np.intp)
    onehot[np.arange(h)[:, None], np.arange(w)[None, :], idx] = 1.0
    acc = np.zeros((oh, ow, n_values), dtype=np.float64)
    cnt = np.zeros((oh, ow), dtype=np.float64)
    iy = np.arange(h) // stride
    ix = np.arange(w) // stride
    np.add.at(acc, (iy[:, None], ix[None, :]), onehot)
    np.add.at(cnt, (iy[:, None], ix[None, :]), 1.0)
    return acc / cnt[:, :, None]


NUMPY_IMPLS = {
    "disc_footprint": _disc_footprint_np,
    "stroke_footprint": _stroke_footprint_np,
    "box_band_footprint": _box_band_footprint_np,
    "label_components": _label_components_np,
    "convolve2d_nearest": _convolve2d_nearest_np,
    "onehot_area_pool": _onehot_area_pool_np,
}

_DISABLED = os.environ.get("IMATTE_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

NUMBA_IMPLS = None
if not _DISABLED:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - exercised via the env flag instead
        njit = None

    if njit is not None:

        @njit(cache=True)
        def _disc_footprint_nb(h, w, cx, cy, radius):
            out = np.zeros((h, w), dtype=np.bool_)
            r_sq = radius * radius
            for i in range(h):
                dy = i - cy
                for j in range(w):
                    dx = j - cx
                    if dx * dx + dy * dy <= r_sq:
                        out[i, j] = True
            return out

        @njit(cache=True)
        def _stroke_footprint_nb(h, w, points, radius):
            out = np.zeros((h, w), dtype=np.bool_)
            r_sq = radius * radius
            n = points.shape[0]
            last = n - 1 if n > 1 else 1
            for k in range(max(last, 1)):
                ax, ay = points[k, 0], points[k, 1]
                if n > 1:
                    bx, by = points[k + 1, 0], points[k + 1, 1]
                else:
                    bx, by = ax, ay
                lo_y = max(int(np.floor(min(ay, by) - radius)), 0)
                hi_y = min(int(np.ceil(max(ay, by) + radius)), h - 1)
                lo_x = max(int(np.floor(min(ax, bx) - radius)), 0)
                hi_x = min(int(np.ceil(max(ax, bx) + radius)), w - 1)
                dx, dy = bx - ax, by - ay
                seg_len_sq = dx * dx + dy * dy
                for i in range(lo_y, hi_y + 1):
                    for j in range(lo_x, hi_x + 1):
                        if seg_len_sq == 0.0:
                            d_sq = (j - ax) ** 2 + (i - ay) ** 2
                        else:
                            t = ((j - ax) * dx + (i - ay) * dy) / seg_len_sq
                            if t < 0.0:
                                t = 0.0
                            elif t > 1.0:
                                t = 1.0
                            qx, qy = ax + t * dx, ay + t * dy
                            d_sq = (j - qx) ** 2 + (i - qy) ** 2
                        if d_sq <= r_sq:
                            out[i, j] = True
            return out

        @njit(cache=True)
        def _box_band_footprint_nb(h, w, x1, y1, x2, y2, band):
            out = np.zeros((h, w), dtype=np.bool_)
            for i in range(h):
                for j in range(w):
                    dx = max(max(x1 - j, j - x2), 0.0)
                    dy = max(max(y1 - i, i - y2), 0.0)
                    if dx > 0.0 or dy > 0.0:
                        dist = np.sqrt(dx * dx + dy * dy)
                    else:
                        dist = max(min(min(j - x1, x2 - j), min(i - y1, y2 - i)), 0.0)
                    if dist <= band:
                        out[i, j] = True
            return out

        @njit(cache=True)
        def _label_components_nb(mask):
            h, w = mask.shape
            labels = np.zeros((h, w), dtype=np.int32)
            stack = np.empty(h * w, dtype=np.int64)
            count = 0
            for sy in range(h):
                for sx in range(w):
                    if mask[sy, sx] and labels[sy, sx] == 0:
                        count += 1
                        top = 0
                        stack[top] = sy * w + sx
                        labels[sy, sx] = count
                        top += 1
                        while top > 0:
                            top -= 1
                            flat = stack[top]
                            cy = flat // w
                            cx = flat - cy * w
                            if cy > 0 and mask[cy - 1, cx] and labels[cy - 1, cx] == 0:
                                labels[cy - 1, cx] = count
                                stack[top] = flat - w
                                top += 1
                            if cy < h - 1 and mask[cy + 1, cx] and labels[cy + 1, cx] == 0:
                                labels[cy + 1, cx] = count
                                stack[top] = flat + w
                                top += 1
                            if cx > 0 and mask[cy, cx - 1] and labels[cy, cx - 1] == 0:
                                labels[cy, cx - 1] = count
                                stack[top] = flat - 1
                                top += 1
                            if cx < w - 1 and mask[cy, cx + 1] and labels[cy, cx + 1] == 0:
                                labels[cy, cx + 1] = count
                                stack[top] = flat + 1
                                top += 1
            return labels, count

        @njit(cache=True)
        def _convolve2d_nearest_nb(img, kernel):
            h, w = img.shape
            kh, kw = kernel.shape
            cy, cx = kh // 2, kw // 2
            out = np.zeros((h, w), dtype=np.float64)
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for u in range(kh):
                        yy = i + cy - u
                        if yy < 0:
                            yy = 0
                        elif yy >= h:
                            yy = h - 1
                        for v in range(kw):
                            xx = j + cx - v
                            if xx < 0:
                                xx = 0
                            elif xx >= w:
                                xx = w - 1
                            acc += img[yy, xx] * kernel[u, v]
                    out[i, j] = acc
            return out

        @njit(cache=True)
        def _onehot_area_pool_nb(values, stride, n_values):
            h, w = values.shape
            oh = (h + stride - 1) // stride
            ow = (w + stride - 1) // stride
            acc = np.zeros((oh, ow, n_values), dtype=np.float64)
            cnt = np.zeros((oh, ow), dtype=np.float64)
            for i in range(h):
                oi = i // stride
                for j in range(w):
                    oj = j // stride
                    v = values[i, j]
                    if v < 0:
                        v = 0
                    elif v >= n_values:
                        v = n_values - 1
                    acc[oi, oj, v] += 1.0
                    cnt[oi, oj] += 1.0
            for oi in range(oh):
                for oj in range(ow):
                    for v in range(n_values):
                        acc[oi, oj, v] /= cnt[oi, oj]
            return acc

        def _label_wrap(mask):
            labels, count = _label_components_nb(np.ascontiguousarray(mask, dtype=np.bool_))
            return labels, int(count)

        NUMBA_IMPLS = {
            "disc_footprint": lambda h, w, cx, cy, r: _disc_footprint_nb(h, w, float(cx), float(cy), float(r)),
            "stroke_footprint": lambda h, w, pts, r: _stroke_footprint_nb(
                h, w, np.ascontiguousarray(pts, dtype=np.float64), float(r)),
            "box_band_footprint": lambda h, w, x1, y1, x2, y2, b: _box_band_footprint_nb(
                h, w, float(x1), float(y1), float(x2), float(y2), float(b)),
            "label_components": _label_wrap,
            "convolve2d_nearest": lambda img, k: _convolve2d_nearest_nb(
                np.ascontiguousarray(img, dtype=np.float64), np.ascontiguousarray(k, dtype=np.float64)),
            "onehot_area_pool": lambda v, s, n: _onehot_area_pool_nb(
                np.ascontiguousarray(v, dtype=np.int64), s, n),
        }

USING_NUMBA = NUMBA_IMPLS is not None
_ACTIVE = NUMBA_IMPLS if USING_NUMBA else NUMPY_IMPLS

disc_footprint = _ACTIVE["disc_footprint"]
stroke_footprint = _ACTIVE["stroke_footprint"]
box_band_footprint = _ACTIVE["box_band_footprint"]
label_components = _ACTIVE["label_components"]
convolve2d_nearest = _ACTIVE["convolve2d_nearest"]
onehot_area_pool = _ACTIVE["onehot_area_pool"]
