"""Polygons, shrink offsets, inward offsetting and rasterization.

Coordinates are pixel coordinates ``(x, y)`` with the centre of pixel
``(row, col)`` at ``(col + 0.5, row + 0.5)``. A polygon whose corners sit on
integer coordinates therefore covers exactly the pixels it encloses.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pyclipper
from scipy import ndimage
from skimage import measure

# fixed-point scale for the clipper integer grid (~1.5e-5 px resolution)
CLIPPER_SCALE = 2 ** 16
MITER_LIMIT = 2.0


class DegenerateGeometryError(ValueError):
    """Raised for polygons with zero area or zero perimeter."""


def signed_area(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass
class Polygon:
    points: np.ndarray
    id: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(pts) > 1 and np.allclose(pts[0], pts[-1]):
            pts = pts[:-1]
        if len(pts) < 3:
            raise DegenerateGeometryError(f"polygon needs >= 3 vertices, got {len(pts)}")
        # store with positive signed area
        if signed_area(pts) < 0:
            pts = pts[::-1].copy()
        self.points = pts

    @property
    def area(self) -> float:
        return abs(signed_area(self.points))

    @property
    def perimeter(self) -> float:
        d = np.diff(np.vstack([self.points, self.points[:1]]), axis=0)
        return float(np.hypot(d[:, 0], d[:, 1]).sum())

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def bounds(self) -> tuple[float, float, float, float]:
        (x0, y0), (x1, y1) = self.points.min(0), self.points.max(0)
        return float(x0), float(y0), float(x1), float(y1)

    def scaled(self, sx: float, sy: float) -> "Polygon":
        return Polygon(self.points * np.array([sx, sy]), id=self.id)

    def to_dict(self) -> dict:
        return {"id": int(self.id), "points": self.points.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Polygon":
        return cls(np.asarray(d["points"], dtype=np.float64), id=int(d["id"]))

    @classmethod
    def rectangle(cls, x0, y0, x1, y1, id: int = 0) -> "Polygon":
        return cls(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64), id=id)


@dataclass
class PolygonSet:
    polygons: list[Polygon] = field(default_factory=list)

    def __post_init__(self):
        ids = [p.id for p in self.polygons]
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise ValueError(f"instance ids must be dense 1..N and unique, got {ids}")

    @classmethod
    def from_points(cls, point_lists: Iterable) -> "PolygonSet":
        """Build a set from raw vertex lists, assigning ids 1..N in order."""
        return cls([Polygon(p, id=i + 1) for i, p in enumerate(point_lists)])

    def __len__(self):
        return len(self.polygons)

    def __iter__(self):
        return iter(self.polygons)

    def __getitem__(self, i):
        return self.polygons[i]

    def scaled(self, sx: float, sy: float) -> "PolygonSet":
        return PolygonSet([p.scaled(sx, sy) for p in self.polygons])

    def to_json(self) -> str:
        return json.dumps([p.to_dict() for p in self.polygons])

    @classmethod
    def from_json(cls, text: str) -> "PolygonSet":
        return cls(sorted((Polygon.from_dict(d) for d in json.loads(text)), key=lambda p: p.id))


def shrink_offset(polygon: Polygon, shrink_ratio: float = 0.4) -> float:
    """Inward offset distance ``A * (1 - r**2) / L`` for a kernel of ratio ``r``."""
    if not 0 < shrink_ratio <= 1:
        raise ValueError(f"shrink_ratio must lie in (0, 1], got {shrink_ratio}")
    area, perim = polygon.area, polygon.perimeter
    if area <= 0 or perim <= 0:
        raise DegenerateGeometryError("polygon has zero area or perimeter")
    return area * (1.0 - shrink_ratio ** 2) / perim


def shrink_polygon(polygon: Polygon, offset: float) -> Polygon | None:
    """Offset ``polygon`` inward by ``offset`` pixels (Vatti clipping, miter joins).

    Returns ``None`` when the polygon vanishes. If the offset splits a
    non-convex polygon into pieces, the largest piece is kept.
    """
    if offset < 0:
        raise ValueError("offset must be >= 0")
    if offset == 0:
        return Polygon(polygon.points.copy(), id=polygon.id)
    path = np.round(polygon.points * CLIPPER_SCALE).astype(np.int64).tolist()
    pco = pyclipper.PyclipperOffset(miter_limit=MITER_LIMIT)
    pco.AddPath(path, pyclipper.JT_MITER, pyclipper.ET_CLOSEDPOLYGON)
    pieces = pco.Execute(-offset * CLIPPER_SCALE)
    pieces = [np.asarray(p, dtype=np.float64) / CLIPPER_SCALE for p in pieces if len(p) >= 3]
    pieces = [p for p in pieces if abs(signed_area(p)) > 0]
    if not pieces:
        return None
    best = max(pieces, key=lambda p: abs(signed_area(p)))
    return Polygon(best, id=polygon.id)


def rasterize_polygon(polygon: Polygon, height: int, width: int) -> np.ndarray:
    """Boolean mask of pixels whose centres fall inside ``polygon`` (even-odd rule)."""
    mask = np.zeros((height, width), dtype=bool)
    pts = polygon.points
    _, y0, _, y1 = polygon.bounds()
    r0 = max(int(np.floor(y0 - 0.5)), 0)
    r1 = min(int(np.ceil(y1 - 0.5)) + 1, height)
    if r1 <= r0:
        return mask
    ys = np.arange(r0, r1) + 0.5
    a, b = pts, np.roll(pts, -1, axis=0)
    ya, yb = a[:, 1][None, :], b[:, 1][None, :]
    yy = ys[:, None]
    # half-open edge rule avoids double-counting shared vertices
    crosses = ((ya <= yy) & (yy < yb)) | ((yb <= yy) & (yy < ya))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (yy - ya) / (yb - ya)
        xs = a[:, 0][None, :] + t * (b[:, 0] - a[:, 0])[None, :]
    xs = np.where(crosses, xs, np.inf)
    xs.sort(axis=1)
    counts = crosses.sum(axis=1)
    # column of first pixel centre at or right of each crossing
    cols = np.clip(np.ceil(xs - 0.5), 0, width)
    acc = np.zeros((r1 - r0, width + 1), dtype=np.int32)
    k = np.arange(xs.shape[1])[None, :]
    valid = k < counts[:, None]
    sign = np.where(k % 2 == 0, 1, -1)
    rows = np.broadcast_to(np.arange(r1 - r0)[:, None], xs.shape)
    np.add.at(acc, (rows[valid], cols[valid].astype(np.int64)), sign.repeat(len(rows), 0)[valid])
    mask[r0:r1] = np.cumsum(acc, axis=1)[:, :width] > 0
    return mask


def rasterize(polygons: PolygonSet | Sequence[Polygon], height: int, width: int) -> np.ndarray:
    """Instance-id map; on overlap the later (higher id) polygon wins."""
    if height <= 0 or width <= 0:
        raise ValueError("canvas dimensions must be positive")
    out = np.zeros((height, width), dtype=np.int32)
    for poly in sorted(polygons, key=lambda p: p.id):
        out[rasterize_polygon(poly, height, width)] = poly.id
    return out


def mask_to_polygons(mask: np.ndarray, connectivity: int = 4) -> PolygonSet:
    """Trace the outer boundary of each connected component of a binary mask.

    Holes are filled. Contours run along pixel edges with chamfered corners,
    so rasterizing the result reproduces the mask up to a one-pixel band.
    """
    mask = np.asarray(mask) > 0
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    labels, n = ndimage.label(mask, structure=structure)
    polys = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        comp = np.pad(ndimage.binary_fill_holes(labels[sl] == idx), 1)
        contours = measure.find_contours(comp.astype(np.float64), 0.5)
        if not contours:
            continue
        contour = max(contours, key=len)
        contour = measure.approximate_polygon(contour, tolerance=0.01)
        # (row, col) in padded crop -> (x, y) pixel coordinates
        xy = np.stack([contour[:, 1] - 1 + sl[1].start + 0.5,
                       contour[:, 0] - 1 + sl[0].start + 0.5], axis=1)
        try:
            polys.append(Polygon(xy, id=len(polys) + 1))
        except DegenerateGeometryError:
            continue
    return PolygonSet(polys)
