"""Samples, manifests, preprocessing, augmentation and synthetic document pairs."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
from shapely import geometry as sg

from .geometry import Polygon, PolygonSet

LEVELS = ("I", "II", "III")
SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1


@dataclass
class Sample:
    reference_image: np.ndarray   # (H, W, 3) uint8 RGB
    reference_mask: np.ndarray    # (H, W) uint8 {0, 1}
    target_image: np.ndarray      # (H', W', 3) uint8 RGB
    target_polygons: PolygonSet
    level: str
    pair_id: str

    def validate(self) -> None:
        if self.reference_mask.shape != self.reference_image.shape[:2]:
            raise ValueError(f"{self.pair_id}: reference mask and image dims differ")
        if not self.reference_mask.any():
            raise ValueError(f"{self.pair_id}: empty reference mask")
        if self.level not in LEVELS:
            raise ValueError(f"{self.pair_id}: unknown level {self.level!r}")
        h, w = self.target_image.shape[:2]
        for p in self.target_polygons:
            x0, y0, x1, y1 = p.bounds()
            if x0 < -1e-6 or y0 < -1e-6 or x1 > w + 1e-6 or y1 > h + 1e-6:
                raise ValueError(f"{self.pair_id}: polygon {p.id} leaves the target image")


# --------------------------------------------------------------------------
# manifest I/O


class ManifestError(Exception):
    pass


class ManifestNotFoundError(ManifestError, FileNotFoundError):
    pass


class ManifestSchemaError(ManifestError):
    pass


class DanglingPathError(ManifestError):
    pass


class SplitLeakError(ManifestError):
    pass


RECORD_KEYS = ("pair_id", "split", "level", "ref_image", "ref_mask", "tgt_image", "tgt_polygons")
PATH_KEYS = ("ref_image", "ref_mask", "tgt_image", "tgt_polygons")


@dataclass
class Record:
    pair_id: str
    split: str
    level: str
    ref_image: Path
    ref_mask: Path
    tgt_image: Path
    tgt_polygons: Path


@dataclass
class Manifest:
    records: list[Record]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestSchemaError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict) or doc.get("version") != MANIFEST_VERSION \
            or not isinstance(doc.get("records"), list):
        raise ManifestSchemaError(f"{path}: expected {{'version': 1, 'records': [...]}}")
    root = path.parent
    records, seen = [], {}
    for i, rec in enumerate(doc["records"]):
        if not isinstance(rec, dict) or set(rec) != set(RECORD_KEYS):
            raise ManifestSchemaError(f"record {i}: keys must be exactly {RECORD_KEYS}")
        if rec["split"] not in SPLITS or rec["level"] not in LEVELS:
            raise ManifestSchemaError(f"record {rec['pair_id']!r}: bad split or level")
        pid = rec["pair_id"]
        if pid in seen:
            raise SplitLeakError(f"pair_id {pid!r} appears in splits {seen[pid]!r} and {rec['split']!r}")
        seen[pid] = rec["split"]
        paths = {}
        for key in PATH_KEYS:
            p = root / rec[key]
            if not p.is_file():
                raise DanglingPathError(f"record {pid!r}: {key} -> {p} does not exist")
            paths[key] = p
        records.append(Record(pid, rec["split"], rec["level"], **paths))
    return Manifest(records, root)


def write_manifest(records: list[dict], path: str | Path) -> None:
    Path(path).write_text(json.dumps({"version": MANIFEST_VERSION, "records": records}, indent=1))


def read_mask(path) -> np.ndarray:
    m = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if m is None:
        raise OSError(f"cannot read mask {path}")
    return (m > 127).astype(np.uint8)


def read_image(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise OSError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def write_image(path, image: np.ndarray) -> None:
    if image.ndim == 3:
        image = cv2.cvtColor(image, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), image):
        raise OSError(f"cannot write {path}")


def load_sample(record: Record) -> Sample:
    return Sample(read_image(record.ref_image), read_mask(record.ref_mask),
                  read_image(record.tgt_image),
                  PolygonSet.from_json(Path(record.tgt_polygons).read_text()),
                  record.level, record.pair_id)


def save_sample(sample: Sample, directory: str | Path, split: str) -> dict:
    """Write the four artifacts of ``sample`` and return its manifest record."""
    directory = Path(directory)
    stem = sample.pair_id
    names = {"ref_image": f"{stem}_ref.png", "ref_mask": f"{stem}_ref_mask.png",
             "tgt_image": f"{stem}_tgt.png", "tgt_polygons": f"{stem}_tgt_polygons.json"}
    write_image(directory / names["ref_image"], sample.reference_image)
    write_image(directory / names["ref_mask"], sample.reference_mask.astype(np.uint8) * 255)
    write_image(directory / names["tgt_image"], sample.target_image)
    (directory / names["tgt_polygons"]).write_text(sample.target_polygons.to_json())
    return {"pair_id": sample.pair_id, "split": split, "level": sample.level, **names}


def assign_splits(pair_ids: list[str], fractions=(0.8, 0.1)) -> dict[str, str]:
    """Deterministic 80/10/10 split ordered by a hash of the pair id."""
    order = sorted(pair_ids, key=lambda p: hashlib.sha1(p.encode()).hexdigest())
    n = len(order)
    n_train = round(fractions[0] * n)
    n_val = round(fractions[1] * n)
    out = {}
    for i, pid in enumerate(order):
        out[pid] = "train" if i < n_train else "val" if i < n_train + n_val else "test"
    return out


# --------------------------------------------------------------------------
# preprocessing


def normalize_image(image: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) -> float32 (3, H, W) scaled to [-1, 1]."""
    return ((image.astype(np.float32) / 255.0 - 0.5) / 0.5).transpose(2, 0, 1).copy()


@dataclass
class Prepared:
    reference: np.ndarray     # (3, H, W) float32
    mask: np.ndarray          # (H, W) float32 {0, 1}
    target: np.ndarray        # (3, H, W) float32
    polygons: PolygonSet      # in resized target coordinates
    level: str
    pair_id: str
    target_scale: tuple[float, float]   # (sx, sy) applied to target coordinates


def preprocess(sample: Sample, size: tuple[int, int] = (640, 640)) -> Prepared:
    """Resize both images to ``size`` = (H, W) and scale the geometry with them."""
    h, w = size
    for img in (sample.reference_image, sample.target_image):
        if img.shape[0] == 0 or img.shape[1] == 0:
            raise ValueError(f"{sample.pair_id}: zero-sized image")
    ref = cv2.resize(sample.reference_image, (w, h), interpolation=cv2.INTER_LINEAR)
    tgt = cv2.resize(sample.target_image, (w, h), interpolation=cv2.INTER_LINEAR)
    mask = cv2.resize(sample.reference_mask.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST)
    th, tw = sample.target_image.shape[:2]
    sx, sy = w / tw, h / th
    return Prepared(normalize_image(ref), mask.astype(np.float32), normalize_image(tgt),
                    sample.target_polygons.scaled(sx, sy), sample.level, sample.pair_id, (sx, sy))


# --------------------------------------------------------------------------
# augmentation


def _clip_polygons(polys: list[np.ndarray], h: int, w: int) -> PolygonSet:
    canvas = sg.box(0, 0, w, h)
    out = []
    for pts in polys:
        shape = sg.Polygon(pts).buffer(0).intersection(canvas)
        if shape.is_empty:
            continue
        if shape.geom_type != "Polygon":
            shape = max((g for g in getattr(shape, "geoms", []) if g.geom_type == "Polygon"),
                        key=lambda g: g.area, default=None)
        if shape is None or shape.area < 1.0:
            continue
        out.append(np.asarray(shape.exterior.coords)[:-1])
    return PolygonSet.from_points(out)


def augment(sample: Sample, seed: int, p_flip: float = 0.5, p_rotate: float = 0.5,
            p_color: float = 0.5, max_angle: float = 10.0, jitter: float = 0.2) -> Sample:
    """Random flip, rotation and brightness/contrast, deterministic per seed.

    Geometric parameters are drawn once and applied to both images together
    with their own mask/polygons. Photometric jitter only touches pixels.
    """
    rng = np.random.default_rng(seed)
    flip = rng.random() < p_flip
    angle = rng.uniform(-max_angle, max_angle) if rng.random() < p_rotate else 0.0
    photometric = [(rng.uniform(1 - jitter, 1 + jitter), rng.uniform(-jitter, jitter) * 255)
                   if rng.random() < p_color else None for _ in range(2)]

    ref, mask, tgt = sample.reference_image, sample.reference_mask, sample.target_image
    polys = [p.points.copy() for p in sample.target_polygons]
    th, tw = tgt.shape[:2]
    if flip:
        ref, mask, tgt = ref[:, ::-1], mask[:, ::-1], tgt[:, ::-1]
        polys = [np.column_stack([tw - p[:, 0], p[:, 1]]) for p in polys]
    if angle:
        def rot(img, interp, size):
            h, w = size
            m = cv2.getRotationMatrix2D((w / 2, h / 2), angle, 1.0)
            return cv2.warpAffine(np.ascontiguousarray(img), m, (w, h), flags=interp,
                                  borderMode=cv2.BORDER_REPLICATE if img.ndim == 3 else cv2.BORDER_CONSTANT)
        rh, rw = ref.shape[:2]
        ref = rot(ref, cv2.INTER_LINEAR, (rh, rw))
        mask = rot(mask, cv2.INTER_NEAREST, (rh, rw))
        tgt = rot(tgt, cv2.INTER_LINEAR, (th, tw))
        m = cv2.getRotationMatrix2D((tw / 2, th / 2), angle, 1.0)
        polys = [p @ m[:, :2].T + m[:, 2] for p in polys]
    if flip or angle:
        polygons = _clip_polygons(polys, th, tw)
    else:
        polygons = PolygonSet([Polygon(p.points.copy(), id=p.id) for p in sample.target_polygons])

    def color(img, params):
        if params is None:
            return np.ascontiguousarray(img)
        a, b = params
        return np.clip(img.astype(np.float32) * a + b, 0, 255).astype(np.uint8)

    return Sample(color(ref, photometric[0]), np.ascontiguousarray(mask),
                  color(tgt, photometric[1]), polygons, sample.level, sample.pair_id)


# --------------------------------------------------------------------------
# synthetic document pairs

ARCHETYPES = ("stamp", "table", "figure", "title")
# (width range, height range) as fractions of the canvas side
_SIZES = {
    "stamp": ((0.14, 0.19), None),
    "table": ((0.30, 0.42), (0.10, 0.13)),
    "figure": ((0.24, 0.34), (0.18, 0.26)),
    "title": ((0.45, 0.65), (0.06, 0.085)),
}
_MARGIN = 4
# spacing between table rows; keeps neighbouring kernels more than one output token apart
_ROW_GAP = 0.035
_PAGE = np.array([246, 244, 238], dtype=np.float64)


@dataclass
class _Element:
    kind: str
    style: int
    rows: int              # >1 only for stacked table rows
    w: int
    h: int                 # height of one row
    seed: int              # fixes the inner rendering
    gap: int = 0           # vertical spacing between rows
    x: int = 0
    y: int = 0

    @property
    def height(self) -> int:
        return self.rows * self.h + (self.rows - 1) * self.gap

    def box(self):
        return self.x, self.y, self.x + self.w, self.y + self.height

    def row_boxes(self):
        pitch = self.h + self.gap
        return [(self.x, self.y + i * pitch, self.x + self.w, self.y + i * pitch + self.h)
                for i in range(self.rows)]


def _new_element(kind, style, rows, side, rng) -> _Element:
    (w0, w1), hr = _SIZES[kind]
    w = int(rng.uniform(w0, w1) * side)
    h = w if hr is None else int(rng.uniform(*hr) * side)
    gap = int(round(_ROW_GAP * side)) if kind == "table" else 0
    return _Element(kind, style, rows, w, h, int(rng.integers(1 << 30)), gap)


def _text_bars(img, x0, y0, x1, y1, rng, color, height=3, gap=4):
    y = y0
    while y + height <= y1:
        x = x0
        while x < x1 - 4:
            wlen = int(rng.integers(4, 14))
            xe = min(x + wlen, x1)
            cv2.rectangle(img, (x, y), (xe - 1, y + height - 1), color, -1)
            x = xe + int(rng.integers(2, 5))
        y += height + gap


def _render(img: np.ndarray, el: _Element) -> None:
    x0, y0, x1, y1 = el.box()
    img[y0:y1, x0:x1] = _PAGE.astype(np.uint8)
    for bx0, by0, bx1, by1 in el.row_boxes():
        rng = np.random.default_rng(el.seed)
        img[by0:by1, bx0:bx1] = _PAGE.astype(np.uint8)
        w, h = bx1 - bx0, by1 - by0
        if el.kind == "stamp":
            c = (200, 40, 40) if el.style == 0 else (40, 60, 190)
            if el.style == 0:
                cv2.circle(img, (bx0 + w // 2, by0 + h // 2), w // 2 - 2, c, 3, cv2.LINE_AA)
                cv2.circle(img, (bx0 + w // 2, by0 + h // 2), w // 4, c, 2, cv2.LINE_AA)
            else:
                cv2.rectangle(img, (bx0 + 1, by0 + 1), (bx1 - 2, by1 - 2), c, 2)
                cv2.rectangle(img, (bx0 + 5, by0 + 5), (bx1 - 6, by1 - 6), c, 1)
                cv2.line(img, (bx0 + 5, by0 + 5), (bx1 - 6, by1 - 6), c, 2)
            _text_bars(img, bx0 + w // 3, by0 + h // 2 - 2, bx1 - w // 3, by0 + h // 2 + 3, rng, c, 2, 2)
        elif el.kind == "table":
            if el.style == 1:
                img[by0:by1, bx0:bx1] = (205, 215, 225)
            cv2.rectangle(img, (bx0, by0), (bx1 - 1, by1 - 1), (30, 30, 30), 1 + el.style)
            cols = np.linspace(bx0, bx1, 4).astype(int)
            for cx in cols[1:-1]:
                cv2.line(img, (cx, by0), (cx, by1 - 1), (30, 30, 30), 1)
            for a, b in zip(cols[:-1], cols[1:]):
                _text_bars(img, a + 3, by0 + h // 2 - 1, b - 3, by0 + h // 2 + 2, rng, (60, 60, 60), 2, 2)
        elif el.kind == "figure":
            if el.style == 0:
                img[by0:by1, bx0:bx1] = (222, 228, 236)
                n = int(rng.integers(4, 7))
                bw = max((w - 8) // n - 3, 2)
                for i in range(n):
                    bh = int(rng.uniform(0.25, 0.85) * (h - 8))
                    x = bx0 + 5 + i * (bw + 3)
                    cv2.rectangle(img, (x, by1 - 4 - bh), (x + bw - 1, by1 - 5), (70, 110, 170), -1)
            else:
                cv2.rectangle(img, (bx0, by0), (bx1 - 1, by1 - 1), (90, 90, 90), 1)
                cv2.line(img, (bx0 + 5, by1 - 6), (bx1 - 5, by1 - 6), (40, 40, 40), 1)
                cv2.line(img, (bx0 + 5, by0 + 4), (bx0 + 5, by1 - 6), (40, 40, 40), 1)
                xs = np.linspace(bx0 + 7, bx1 - 6, 7)
                ys = by0 + 6 + rng.uniform(0, 1, 7) * (h - 14)
                pts = np.stack([xs, ys], 1).astype(np.int32)
                cv2.polylines(img, [pts], False, (30, 140, 60), 2, cv2.LINE_AA)
        elif el.kind == "title":
            if el.style == 0:
                _text_bars(img, bx0 + 2, by0 + h // 5, bx1 - 2, by1 - h // 5, rng, (20, 20, 20),
                           max(h - 2 * (h // 5), 3), 0)
            else:
                img[by0:by1, bx0:bx1] = (35, 50, 110)
                _text_bars(img, bx0 + 4, by0 + h // 3, bx1 - 4, by1 - h // 3, rng, (235, 235, 235),
                           max(h - 2 * (h // 3), 2), 0)


def _overlaps(box, others, margin=_MARGIN):
    x0, y0, x1, y1 = box
    return any(x0 < b[2] + margin and b[0] < x1 + margin and y0 < b[3] + margin and b[1] < y1 + margin
               for b in others)


def _place(elements, side, rng, constraint=None, tries=400) -> bool:
    """Place elements without overlap; ``constraint(el)`` may veto a position."""
    placed = []
    for el in elements:
        for _ in range(tries):
            bw, bh = el.w, el.height
            el.x = int(rng.integers(8, side - 8 - bw + 1))
            el.y = int(rng.integers(8, side - 8 - bh + 1))
            if not _overlaps(el.box(), placed) and (constraint is None or constraint(el)):
                placed.append(el.box())
                break
        else:
            return False
    return True


def _page(elements, side, filler_seed, noise_rng, noise_sigma=3.0) -> np.ndarray:
    img = np.empty((side, side, 3), dtype=np.uint8)
    img[:] = _PAGE.astype(np.uint8)
    rng = np.random.default_rng(filler_seed)
    # body-text filler, later covered by the elements
    y = 10
    while y < side - 12:
        if rng.random() < 0.8:
            _text_bars(img, 10, y, side - 10, y + 3, rng, (95, 95, 95), 3, 4)
        y += 8
    for el in elements:
        _render(img, el)
    noise = noise_rng.normal(0, noise_sigma, img.shape)
    return np.clip(img + noise, 0, 255).astype(np.uint8)


def _center(box):
    return np.array([(box[0] + box[2]) / 2, (box[1] + box[3]) / 2])


def synth_pair(level: str, seed: int, size: int = 256) -> Sample:
    """Render a deterministic reference/target pseudo-document pair.

    The prompted archetype appears on both pages. Level I keeps layout and
    rendering (small jitter and noise), level II keeps the rendering but moves
    everything, level III changes rendering style, size and position.
    """
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}")
    rng = np.random.default_rng([LEVELS.index(level) + 1, seed])
    side = size
    diag = np.hypot(side, side)
    roi_kind = ARCHETYPES[int(rng.integers(len(ARCHETYPES)))]
    others = [k for k in ARCHETYPES if k != roi_kind]

    def make_layout(n_roi, style_of, base=None):
        els = []
        if roi_kind == "table":
            src = base[0] if base else _new_element("table", style_of("table"), n_roi, side, rng)
            els.append(replace(src, rows=n_roi))
        else:
            # every instance on a page shares one rendering template
            src = base[0] if base else _new_element(roi_kind, style_of(roi_kind), 1, side, rng)
            els += [replace(src) for _ in range(n_roi)]
        for k in others:
            if rng.random() < 0.6:
                els.append(_new_element(k, style_of(k), 1 if k != "table" else int(rng.integers(1, 3)),
                                        side, rng))
        return els

    def roi_boxes(els):
        roi = [e for e in els if e.kind == roi_kind]
        return [b for e in roi for b in e.row_boxes()]

    styles = {k: int(rng.integers(2)) for k in ARCHETYPES}
    n_ref = int(rng.integers(1, 4))
    for _ in range(50):
        ref_els = make_layout(n_ref, styles.__getitem__)
        if _place(ref_els, side, rng):
            break
        n_ref = max(1, n_ref - 1)
    ref_boxes = roi_boxes(ref_els)
    prompt_box = ref_boxes[int(rng.integers(len(ref_boxes)))]
    filler = int(rng.integers(1 << 30))
    ref_img = _page(ref_els, side, filler, rng)

    if level == "I":
        tgt_els = [replace(e) for e in ref_els]
        placed = []
        for e in tgt_els:
            for _ in range(20):
                dx, dy = rng.integers(-2, 3, size=2)
                cand = replace(e, x=int(np.clip(e.x + dx, 8, side - 8 - e.w)),
                               y=int(np.clip(e.y + dy, 8, side - 8 - e.height)))
                if not _overlaps(cand.box(), placed, margin=1):
                    break
            else:
                cand = e
            e.x, e.y = cand.x, cand.y
            placed.append(e.box())
        tgt_img = _page(tgt_els, side, filler, rng, noise_sigma=5.0)
    else:
        far = lambda el: el.kind != roi_kind or all(
            np.linalg.norm(_center(b) - _center(prompt_box)) > 0.2 * diag for b in el.row_boxes())
        n_tgt = int(rng.integers(1, 4))
        if level == "II":
            base = [e for e in ref_els if e.kind == roi_kind]
            style_of = styles.__getitem__
        else:
            base = None
            style_of = lambda k: 1 - styles[k] if k == roi_kind else int(rng.integers(2))
        for _ in range(100):
            tgt_els = make_layout(n_tgt, style_of, base)
            # the prompted archetype is placed first so it gets the freest canvas
            if _place(tgt_els, side, rng, constraint=far):
                break
            n_tgt = max(1, n_tgt - 1)
        tgt_img = _page(tgt_els, side, int(rng.integers(1 << 30)), rng)

    mask = np.zeros((side, side), dtype=np.uint8)
    x0, y0, x1, y1 = prompt_box
    mask[y0:y1, x0:x1] = 1
    polys = PolygonSet([Polygon.rectangle(*b, id=i + 1) for i, b in enumerate(roi_boxes(tgt_els))])
    sample = Sample(ref_img, mask, tgt_img, polys, level, f"L{level}-{seed:06d}")
    sample.validate()
    return sample


def synth_dataset(count_per_level: int, seed: int = 0, size: int = 256,
                  levels=LEVELS) -> list[Sample]:
    return [synth_pair(level, seed * 100_000 + i, size) for level in levels
            for i in range(count_per_level)]
