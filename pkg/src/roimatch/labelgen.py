"""Supervision targets for the segmentation head: regions, shrunk kernels, instances."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .geometry import (DegenerateGeometryError, PolygonSet, rasterize_polygon,
                       shrink_offset, shrink_polygon)


@dataclass
class SegTargets:
    region: np.ndarray             # (H, W) uint8 {0, 1}
    kernel: np.ndarray             # (H, W) uint8 {0, 1}
    region_instances: np.ndarray   # (H, W) int32, last drawn id wins
    kernel_instances: np.ndarray   # (H, W) int32
    instance_ids: list[int]
    per_instance_region: list[np.ndarray] = field(default_factory=list)
    per_instance_kernel: list[np.ndarray] = field(default_factory=list)
    skipped: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.region.shape

    def __len__(self):
        return len(self.instance_ids)


def _fallback_kernel(region: np.ndarray) -> np.ndarray:
    # the region pixel closest to the region centroid
    rows, cols = np.nonzero(region)
    cy, cx = rows.mean(), cols.mean()
    k = int(np.argmin((rows - cy) ** 2 + (cols - cx) ** 2))
    out = np.zeros_like(region)
    out[rows[k], cols[k]] = True
    return out


def generate_targets(polygons: PolygonSet, height: int, width: int,
                     shrink_ratio: float = 0.4) -> SegTargets:
    """Rasterize region and kernel labels for every instance in ``polygons``.

    Each polygon is shrunk by its own offset. An instance whose kernel
    vanishes keeps a single pixel at its centroid so the decoder can still
    recover it. Degenerate polygons (zero area, or covering no pixel centre)
    are skipped and counted in ``skipped``.
    """
    if not 0 < shrink_ratio <= 1:
        raise ValueError(f"shrink_ratio must lie in (0, 1], got {shrink_ratio}")
    region_inst = np.zeros((height, width), dtype=np.int32)
    kernel_inst = np.zeros((height, width), dtype=np.int32)
    ids, regions, kernels = [], [], []
    skipped = 0
    for poly in sorted(polygons, key=lambda p: p.id):
        try:
            offset = shrink_offset(poly, shrink_ratio)
        except DegenerateGeometryError:
            skipped += 1
            continue
        reg = rasterize_polygon(poly, height, width)
        if not reg.any():
            skipped += 1
            continue
        shrunk = shrink_polygon(poly, offset)
        ker = rasterize_polygon(shrunk, height, width) & reg if shrunk is not None else None
        if ker is None or not ker.any():
            ker = _fallback_kernel(reg)
        ids.append(poly.id)
        regions.append(reg)
        kernels.append(ker)
        region_inst[reg] = poly.id
        kernel_inst[ker] = poly.id
    region = (region_inst > 0).astype(np.uint8)
    kernel = (kernel_inst > 0).astype(np.uint8)
    return SegTargets(region, kernel, region_inst, kernel_inst, ids, regions, kernels, skipped)


def valid_pixels(targets: SegTargets, instance: int) -> np.ndarray:
    """Boolean mask of the ring ``region_i \\ kernel_i`` supervised by the aggregation loss."""
    try:
        k = targets.instance_ids.index(instance)
    except ValueError:
        raise KeyError(f"unknown instance id {instance}") from None
    return targets.per_instance_region[k] & ~targets.per_instance_kernel[k]


def save_targets(targets: SegTargets, path: str | Path) -> None:
    """Write targets as a multi-page 8-bit TIFF plus a JSON sidecar."""
    path = Path(path)
    pages = [targets.region * 255, targets.kernel * 255,
             targets.region_instances.astype(np.uint8), targets.kernel_instances.astype(np.uint8)]
    pages += [m.astype(np.uint8) * 255 for m in targets.per_instance_region]
    pages += [m.astype(np.uint8) * 255 for m in targets.per_instance_kernel]
    if max(targets.instance_ids, default=0) > 255:
        raise ValueError("instance ids above 255 do not fit an 8-bit map")
    if not cv2.imwritemulti(str(path.with_suffix(".tiff")), pages):
        raise OSError(f"could not write {path}")
    meta = {"instance_ids": targets.instance_ids, "skipped": targets.skipped,
            "pages": ["region", "kernel", "region_instances", "kernel_instances",
                      "per_instance_region...", "per_instance_kernel..."]}
    path.with_suffix(".json").write_text(json.dumps(meta))


def load_targets(path: str | Path) -> SegTargets:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    ok, pages = cv2.imreadmulti(str(path.with_suffix(".tiff")), flags=cv2.IMREAD_UNCHANGED)
    if not ok:
        raise OSError(f"could not read {path}")
    n = len(meta["instance_ids"])
    return SegTargets(
        region=(pages[0] > 0).astype(np.uint8),
        kernel=(pages[1] > 0).astype(np.uint8),
        region_instances=pages[2].astype(np.int32),
        kernel_instances=pages[3].astype(np.int32),
        instance_ids=list(meta["instance_ids"]),
        per_instance_region=[p > 0 for p in pages[4:4 + n]],
        per_instance_kernel=[p > 0 for p in pages[4 + n:4 + 2 * n]],
        skipped=meta["skipped"],
    )
