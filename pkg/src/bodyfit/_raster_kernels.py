"""numba loops behind the hard and soft rasterizers."""
import math

import numba
import numpy as np


@numba.njit(cache=True, inline="always")
def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@numba.njit(cache=True)
def _bbox(tri, margin, height, width):
    xmin = min(tri[0, 0], tri[1, 0], tri[2, 0]) - margin
    xmax = max(tri[0, 0], tri[1, 0], tri[2, 0]) + margin
    ymin = min(tri[0, 1], tri[1, 1], tri[2, 1]) - margin
    ymax = max(tri[0, 1], tri[1, 1], tri[2, 1]) + margin
    x0 = max(int(math.floor(xmin - 0.5)), 0)
    x1 = min(int(math.ceil(xmax - 0.5)), width - 1)
    y0 = max(int(math.floor(ymin - 0.5)), 0)
    y1 = min(int(math.ceil(ymax - 0.5)), height - 1)
    return x0, x1, y0, y1


@numba.njit(cache=True)
def hard_labels(verts, faces, labels, height, width, out):
    """out[label, y, x] = 1 where a face with that label covers the pixel centre."""
    tri = np.empty((3, 2))
    for f in range(faces.shape[0]):
        for i in range(3):
            tri[i, 0] = verts[faces[f, i], 0]
            tri[i, 1] = verts[faces[f, i], 1]
        ax, ay, bx, by, cx, cy = tri[0, 0], tri[0, 1], tri[1, 0], tri[1, 1], tri[2, 0], tri[2, 1]
        area = _edge(ax, ay, bx, by, cx, cy)
        if area == 0.0:
            continue
        x0, x1, y0, y1 = _bbox(tri, 0.0, height, width)
        lab = labels[f]
        for y in range(y0, y1 + 1):
            py = y + 0.5
            for x in range(x0, x1 + 1):
                px = x + 0.5
                w0 = _edge(bx, by, cx, cy, px, py)
                w1 = _edge(cx, cy, ax, ay, px, py)
                w2 = _edge(ax, ay, bx, by, px, py)
                if area > 0:
                    inside = w0 >= 0 and w1 >= 0 and w2 >= 0
                else:
                    inside = w0 <= 0 and w1 <= 0 and w2 <= 0
                if inside:
                    out[lab, y, x] = 1.0


@numba.njit(cache=True, inline="always")
def _closest(px, py, ax, ay, bx, by):
    ex = bx - ax
    ey = by - ay
    t = ((px - ax) * ex + (py - ay) * ey) / (ex * ex + ey * ey)
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    rx = px - ax - t * ex
    ry = py - ay - t * ey
    return rx * rx + ry * ry, t, rx, ry


@numba.njit(cache=True)
def _signed_distance(tri, px, py):
    """Signed distance to the triangle boundary plus the gradient bookkeeping.

    Returns (s, edge index, t, rx, ry, sign) where the closest boundary point lies
    on edge (e, e+1) at parameter t, r = p - closest point and s = sign * |r|.
    """
    best = np.inf
    be, bt, brx, bry = 0, 0.0, 0.0, 0.0
    for e in range(3):
        a = e
        b = (e + 1) % 3
        d2, t, rx, ry = _closest(px, py, tri[a, 0], tri[a, 1], tri[b, 0], tri[b, 1])
        if d2 < best:
            best, be, bt, brx, bry = d2, e, t, rx, ry
    ax, ay, bx, by, cx, cy = tri[0, 0], tri[0, 1], tri[1, 0], tri[1, 1], tri[2, 0], tri[2, 1]
    w0 = _edge(bx, by, cx, cy, px, py)
    w1 = _edge(cx, cy, ax, ay, px, py)
    w2 = _edge(ax, ay, bx, by, px, py)
    inside = (w0 >= 0 and w1 >= 0 and w2 >= 0) or (w0 <= 0 and w1 <= 0 and w2 <= 0)
    sign = -1.0 if inside else 1.0
    dist = math.sqrt(best + 1e-24)
    return sign * dist, be, bt, brx, bry, sign, dist


@numba.njit(cache=True, inline="always")
def _log_keep(s, tau):
    # log(sigmoid(s / tau)) computed stably
    x = s / tau
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@numba.njit(cache=True)
def soft_forward(verts, faces, height, width, tau, margin, out):
    """out[pixel] += log(1 - coverage_f) for every face near the pixel."""
    tri = np.empty((3, 2))
    for f in range(faces.shape[0]):
        for i in range(3):
            tri[i, 0] = verts[faces[f, i], 0]
            tri[i, 1] = verts[faces[f, i], 1]
        if _edge(tri[0, 0], tri[0, 1], tri[1, 0], tri[1, 1], tri[2, 0], tri[2, 1]) == 0.0:
            continue
        x0, x1, y0, y1 = _bbox(tri, margin, height, width)
        for y in range(y0, y1 + 1):
            for x in range(x0, x1 + 1):
                s, _, _, _, _, _, _ = _signed_distance(tri, x + 0.5, y + 0.5)
                out[y * width + x] += _log_keep(s, tau)


@numba.njit(cache=True)
def soft_backward(verts, faces, height, width, tau, margin, grad_out, grad_verts):
    tri = np.empty((3, 2))
    for f in range(faces.shape[0]):
        for i in range(3):
            tri[i, 0] = verts[faces[f, i], 0]
            tri[i, 1] = verts[faces[f, i], 1]
        if _edge(tri[0, 0], tri[0, 1], tri[1, 0], tri[1, 1], tri[2, 0], tri[2, 1]) == 0.0:
            continue
        x0, x1, y0, y1 = _bbox(tri, margin, height, width)
        for y in range(y0, y1 + 1):
            for x in range(x0, x1 + 1):
                g = grad_out[y * width + x]
                if g == 0.0:
                    continue
                s, e, t, rx, ry, sign, dist = _signed_distance(tri, x + 0.5, y + 0.5)
                # d/ds log sigmoid(s / tau) = sigmoid(-s / tau) / tau
                z = -s / tau
                if z >= 0:
                    sig = 1.0 / (1.0 + math.exp(-z))
                else:
                    ez = math.exp(z)
                    sig = ez / (1.0 + ez)
                coef = g * sig / tau * sign / dist
                # d|r|/d(closest point) = -r/|r|; closest = (1 - t) a + t b
                va = faces[f, e]
                vb = faces[f, (e + 1) % 3]
                grad_verts[va, 0] -= coef * (1.0 - t) * rx
                grad_verts[va, 1] -= coef * (1.0 - t) * ry
                grad_verts[vb, 0] -= coef * t * rx
                grad_verts[vb, 1] -= coef * t * ry
