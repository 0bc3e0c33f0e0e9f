"""Weak annotations derived from object masks.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row.
Everything here is a pure function of ``(mask, seed)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage import draw

_SQUARE = np.ones((3, 3), dtype=bool)

# clockwise around a pixel, starting west (row, col offsets, rows grow down)
_MOORE = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))
_MOORE_INDEX = {d: i for i, d in enumerate(_MOORE)}


class EmptyMaskError(ValueError):
    pass


class ScribbleError(ValueError):
    """No curve of the required length fits inside the region."""


@dataclass(frozen=True)
class Polyline:
    vertices: np.ndarray  # [n, 2] int (x, y)
    closed: bool = False

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.int64).reshape(-1, 2)
        if len(v) < 2:
            raise ValueError("a polyline needs at least 2 vertices")
        if self.closed and np.any(np.all(v == np.roll(v, -1, axis=0), axis=1)):
            raise ValueError("closed polyline has repeated consecutive vertices")
        object.__setattr__(self, "vertices", v)

    def __len__(self) -> int:
        return len(self.vertices)


def _bool(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    return m > 0


def mask_to_boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one background 8-neighbour.

    Pixels outside the image count as foreground, so a full mask has no
    boundary.
    """
    g = _bool(mask)
    return g & ~ndimage.binary_erosion(g, structure=_SQUARE, border_value=1)


def mask_to_bbox(mask) -> tuple[int, int, int, int]:
    g = _bool(mask)
    if not g.any():
        raise EmptyMaskError("mask has no foreground pixels")
    rows = np.flatnonzero(g.any(axis=1))
    cols = np.flatnonzero(g.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])


# ------------------------------------------------------------ Douglas-Peucker


def point_segment_distance(p, a, b) -> float:
    p, a, b = (np.asarray(v, dtype=np.float64) for v in (p, a, b))
    ab = b - a
    den = float(ab @ ab)
    if den == 0.0:
        return float(np.hypot(*(p - a)))
    t = min(1.0, max(0.0, float((p - a) @ ab) / den))
    return float(np.hypot(*(p - a - t * ab)))


def _segment_distances(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    den = float(ab @ ab)
    d = pts - a
    if den == 0.0:
        return np.hypot(d[:, 0], d[:, 1])
    t = np.clip(d @ ab / den, 0.0, 1.0)
    r = d - t[:, None] * ab
    return np.hypot(r[:, 0], r[:, 1])


def _simplify_open(pts: np.ndarray, eps: float) -> np.ndarray:
    n = len(pts)
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    fp = pts.astype(np.float64)
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        d = _segment_distances(fp[lo + 1 : hi], fp[lo], fp[hi])
        i = int(np.argmax(d))
        if d[i] > eps:
            mid = lo + 1 + i
            keep[mid] = True
            stack.append((lo, mid))
            stack.append((mid, hi))
    return pts[keep]


def douglas_peucker(line: Polyline, eps: float) -> Polyline:
    """Classic recursive simplification; a vertex survives when it lies farther than ``eps``.

    A closed ring is cut at its first vertex and at the vertex farthest from
    it, and the two halves are simplified separately.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    pts = line.vertices
    if not line.closed:
        return Polyline(_simplify_open(pts, eps), closed=False)
    if len(pts) <= 3:
        return line
    d0 = np.hypot(*(pts - pts[0]).T)
    far = int(np.argmax(d0))
    first = _simplify_open(pts[: far + 1], eps)
    second = _simplify_open(np.vstack([pts[far:], pts[:1]]), eps)
    ring = np.vstack([first, second[1:-1]])
    # thin parts are traced twice and may collapse onto repeated vertices
    keep = np.any(ring != np.roll(ring, -1, axis=0), axis=1)
    ring = ring[keep] if keep.sum() >= 2 else ring[:1].repeat(2, axis=0)
    return Polyline(ring, closed=bool(keep.sum() >= 2))


# ------------------------------------------------------------------ polygons


def moore_trace(mask) -> np.ndarray:
    """Outer contour of the component holding the first raster-order pixel.

    Returns ``[n, 2]`` (x, y) vertices in clockwise order (on screen).
    """
    g = np.pad(_bool(mask), 1)
    fg = np.argwhere(g)
    if len(fg) == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    start = (int(fg[0][0]), int(fg[0][1]))
    contour = [start]
    cur, back = start, 0  # entered the start pixel from the west
    second = None
    limit = 4 * g.size + 8
    for _ in range(limit):
        for i in range(8):
            d = (back + i) % 8
            nxt = (cur[0] + _MOORE[d][0], cur[1] + _MOORE[d][1])
            if g[nxt]:
                break
        else:
            break  # isolated pixel
        prev = _MOORE[(d - 1) % 8]
        back = _MOORE_INDEX[(cur[0] + prev[0] - nxt[0], cur[1] + prev[1] - nxt[1])]
        if cur == start and second is not None and nxt == second:
            contour.pop()
            break
        if second is None:
            second = nxt
        contour.append(nxt)
        cur = nxt
    pts = np.array(contour, dtype=np.int64) - 1
    return pts[:, ::-1].copy()


def _polygon_from_component(comp: np.ndarray, eps: float) -> Polyline:
    ring = moore_trace(comp)
    if len(ring) == 1:
        return Polyline(np.vstack([ring, ring]), closed=False)
    if len(ring) == 2:
        return Polyline(ring, closed=True)
    return douglas_peucker(Polyline(ring, closed=True), eps)


def sample_epsilon(seed: int, low: float = 1.0, high: float = 4.0) -> float:
    return float(np.random.default_rng(seed).uniform(low, high))


def mask_to_polygons(mask, eps: float | None = None, seed: int = 0) -> list[Polyline]:
    """One simplified closed polygon per 8-connected component, largest first."""
    g = _bool(mask)
    if not g.any():
        raise EmptyMaskError("mask has no foreground pixels")
    eps = sample_epsilon(seed) if eps is None else float(eps)
    labels, n = ndimage.label(g, structure=_SQUARE)
    sizes = np.bincount(labels.ravel())[1:]
    order = sorted(range(n), key=lambda i: (-sizes[i], i))
    return [_polygon_from_component(labels == i + 1, eps) for i in order]


def mask_to_polygon(mask, eps: float | None = None, seed: int = 0) -> Polyline:
    """Polygon of a single-component mask (see :func:`mask_to_polygons` otherwise)."""
    g = _bool(mask)
    if not g.any():
        raise EmptyMaskError("mask has no foreground pixels")
    _, n = ndimage.label(g, structure=_SQUARE)
    if n > 1:
        raise ValueError(f"mask has {n} components; use mask_to_polygons")
    return mask_to_polygons(g, eps, seed)[0]


def rasterize_polygon(poly: Polyline, shape) -> np.ndarray:
    """Filled polygon including its outline pixels."""
    out = np.zeros(shape, dtype=bool)
    xs, ys = poly.vertices[:, 0], poly.vertices[:, 1]
    rr, cc = draw.polygon(ys, xs, shape=shape)
    out[rr, cc] = True
    # outline edge by edge: polygon_perimeter fails on zero-area rings
    v = poly.vertices
    ends = np.roll(v, -1, axis=0) if poly.closed else v[1:]
    for (x0, y0), (x1, y1) in zip(v, ends):
        rr, cc = draw.line(int(y0), int(x0), int(y1), int(x1))
        ok = (rr >= 0) & (rr < shape[0]) & (cc >= 0) & (cc < shape[1])
        out[rr[ok], cc[ok]] = True
    return out


# ------------------------------------------------------------------ scribbles


def _bbox_diagonal(region: np.ndarray) -> float:
    x0, y0, x1, y1 = mask_to_bbox(region)
    return float(np.hypot(x1 - x0 + 1, y1 - y0 + 1))


def _march(region: np.ndarray, p0, theta: float, curv: float) -> list[tuple[int, int]]:
    """Pixels of ``v = curv * u^2`` in the frame at ``p0`` rotated by ``theta``, while inside."""
    h, w = region.shape
    ca, sa = np.cos(theta), np.sin(theta)

    def walk(sign: float) -> list[tuple[int, int]]:
        pix, u = [], 0.0
        for _ in range(8 * (h + w)):
            v = curv * u * u
            x = p0[0] + u * ca - v * sa
            y = p0[1] + u * sa + v * ca
            c, r = int(round(x)), int(round(y))
            if not (0 <= r < h and 0 <= c < w and region[r, c]):
                break
            if not pix or pix[-1] != (c, r):
                pix.append((c, r))
            u += sign * 0.5 / np.sqrt(1.0 + (2.0 * curv * u) ** 2)
        return pix

    fwd, bwd = walk(1.0), walk(-1.0)
    return bwd[::-1] + fwd[1:]


def _curve_in(region: np.ndarray, rng: np.random.Generator, max_retries: int) -> np.ndarray:
    if not region.any():
        raise ScribbleError("region is empty")
    inner = ndimage.binary_erosion(region, structure=_SQUARE, border_value=1)
    if not inner.any():
        inner = region
    need = 0.2 * _bbox_diagonal(region)
    diag = _bbox_diagonal(inner)
    cand = np.argwhere(inner)
    for _ in range(max_retries):
        r, c = cand[rng.integers(len(cand))]
        theta = rng.uniform(0.0, np.pi)
        curv = 0.0 if rng.random() < 0.5 else rng.uniform(-2.0, 2.0) / max(diag, 1.0)
        pix = _march(inner, (float(c), float(r)), theta, curv)
        if len(pix) < 2:
            continue
        arr = np.array(pix, dtype=np.float64)
        length = float(np.hypot(*np.diff(arr, axis=0).T).sum())
        if length >= need:
            out = np.zeros(region.shape, dtype=bool)
            idx = np.array(pix)
            out[idx[:, 1], idx[:, 0]] = True
            return out
    raise ScribbleError(f"no curve of length >= {need:.1f} px fits after {max_retries} tries")


def generate_scribble(mask, seed: int, max_retries: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """One linear or quadratic 1-px curve inside the foreground and one inside the background."""
    g = _bool(mask)
    if not g.any() or g.all():
        raise ScribbleError("scribbles need both foreground and background pixels")
    rng = np.random.default_rng(seed)
    return _curve_in(g, rng, max_retries), _curve_in(~g, rng, max_retries)
