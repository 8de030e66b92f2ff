"""Decode segmentation maps into region instances.

Kernel components decide how many instances exist; region pixels are then
assigned to the kernel whose mean similarity vector is nearest.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class DecodeConfig:
    kernel_threshold: float = 0.5
    region_threshold: float = 0.5
    assign_distance: float = 6.0
    min_area_px: int = 16
    connectivity: int = 4

    def __post_init__(self):
        for name in ("kernel_threshold", "region_threshold"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.assign_distance <= 0 or self.min_area_px < 0:
            raise ValueError("assign_distance must be > 0 and min_area_px >= 0")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


@dataclass
class Instance:
    id: int
    mask: np.ndarray
    box: tuple[int, int, int, int]
    score: float

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class MatchResult:
    instances: list[Instance]
    merged: np.ndarray

    def to_json(self, mask_file: str | None = None, **extra) -> str:
        payload = {"instances": [{"id": i.id, "box": list(i.box), "area": i.area,
                                  "score": round(i.score, 6)} for i in self.instances],
                   "mask_file": mask_file}
        payload.update(extra)
        return json.dumps(payload, indent=2)


def tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Inclusive (x0, y0, x1, y1) of the non-zero pixels."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])


def kernel_components(kernel_score: np.ndarray, config: DecodeConfig) -> tuple[np.ndarray, int]:
    structure = ndimage.generate_binary_structure(2, 1 if config.connectivity == 4 else 2)
    labels, n = ndimage.label(kernel_score > config.kernel_threshold, structure=structure)
    if n == 0:
        return labels, 0
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = areas >= config.min_area_px
    keep[0] = False
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[keep] = np.arange(1, keep.sum() + 1)
    return remap[labels], int(keep.sum())


def decode(region: np.ndarray, kernel: np.ndarray, similarity: np.ndarray,
           config: DecodeConfig | None = None) -> MatchResult:
    """Turn (H, W) region/kernel scores and (4, H, W) similarity into instances."""
    config = config or DecodeConfig()
    region, kernel, similarity = (np.asarray(a, dtype=np.float64) for a in (region, kernel, similarity))
    labels, n = kernel_components(kernel, config)
    if n == 0:
        return MatchResult([], np.zeros(region.shape, dtype=np.uint8))

    flat_sim = similarity.reshape(similarity.shape[0], -1).T         # (HW, 4)
    flat_lab = labels.ravel()
    counts = np.bincount(flat_lab, minlength=n + 1)[1:]
    centroids = np.stack([np.bincount(flat_lab, weights=flat_sim[:, c], minlength=n + 1)[1:]
                          for c in range(flat_sim.shape[1])], axis=1) / counts[:, None]

    assigned = labels.copy()
    cand = np.flatnonzero((region.ravel() > config.region_threshold) & (flat_lab == 0))
    if cand.size:
        d = np.linalg.norm(flat_sim[cand, None, :] - centroids[None], axis=-1)
        best = np.argmin(d, axis=1)                # lowest kernel id wins ties
        ok = d[np.arange(cand.size), best] < config.assign_distance
        assigned.ravel()[cand[ok]] = best[ok] + 1

    instances = []
    for k in range(1, n + 1):
        mask = assigned == k
        if mask.sum() < config.min_area_px:
            continue
        instances.append(Instance(len(instances) + 1, mask, tight_box(mask),
                                  float(region[mask].mean())))
    merged = np.zeros(region.shape, dtype=np.uint8)
    for inst in instances:
        merged[inst.mask] = 1
    return MatchResult(instances, merged)


def decode_output(output, index: int = 0, config: DecodeConfig | None = None) -> MatchResult:
    """Decode sample ``index`` of a batched model output."""
    return decode(output.region[index].detach().cpu().numpy(),
                  output.kernel[index].detach().cpu().numpy(),
                  output.similarity[index].detach().cpu().numpy(), config)


def boxes_from_masks(result: MatchResult) -> list[tuple[int, int, int, int]]:
    return [tight_box(inst.mask) for inst in result.instances]
