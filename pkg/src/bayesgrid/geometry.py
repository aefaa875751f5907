"""Grid layout, prior boxes, box codec, IoU, target assignment and k-means priors.

Boxes are ``(cx, cy, w, h)`` in input-image pixels. Cell offsets ``c_x, c_y``
are in grid units, so a decoded centre is ``(sigmoid(y*) + c) * stride``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from bayesgrid.errors import ShapeError

PRIORS_PER_SCALE = 3
LOGIT_EPS = 1e-6


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise ValueError("box coordinates must be finite")

    @property
    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self):
        return self.w * self.h

    @classmethod
    def from_corners(cls, x0, y0, x1, y1):
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h])


OCCLUSION_LEVELS = (0, 1, 2, 3)


def occlusion_level(fraction):
    """Bin an occluded fraction into 0 (none), 1 (to 40%), 2 (to 80%), 3 (above 80%)."""
    if fraction <= 0.10:
        return 0
    if fraction <= 0.40:
        return 1
    if fraction <= 0.80:
        return 2
    return 3


@dataclass(frozen=True)
class GroundTruth:
    bbox: BBox
    class_id: int
    occlusion_level: int = 0
    ignore: bool = False
    occlusion_fraction: float = 0.0

    def __post_init__(self):
        if self.occlusion_level not in OCCLUSION_LEVELS:
            raise ValueError(f"occlusion level must be one of {OCCLUSION_LEVELS}, got {self.occlusion_level}")


@dataclass(frozen=True)
class PriorBox:
    pw: float
    ph: float
    scale_index: int
    index_in_scale: int
    global_id: int


@dataclass(frozen=True)
class ScaleGrid:
    stride: int
    height: int
    width: int


@dataclass(frozen=True)
class GridGeometry:
    """Output-grid layout for an ``input_size = (H, W)`` image and a stride pyramid."""

    input_size: tuple
    strides: tuple
    scales: tuple = field(init=False)

    def __post_init__(self):
        h, w = self.input_size
        scales = []
        for s in self.strides:
            if s < 1 or h % s or w % s:
                raise ShapeError(f"stride {s} does not divide input size {h}x{w}")
            scales.append(ScaleGrid(int(s), h // s, w // s))
        object.__setattr__(self, "input_size", (int(h), int(w)))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "scales", tuple(scales))

    @property
    def num_scales(self):
        return len(self.scales)

    def cell_of(self, scale_index, cx, cy):
        g = self.scales[scale_index]
        col = min(max(int(math.floor(cx / g.stride)), 0), g.width - 1)
        row = min(max(int(math.floor(cy / g.stride)), 0), g.height - 1)
        return row, col

    def num_slots(self, priors_per_scale=PRIORS_PER_SCALE):
        return sum(g.height * g.width * priors_per_scale for g in self.scales)


def make_priors(sizes, strides):
    """Partition prior sizes three per scale, smallest areas on the finest stride.

    ``sizes`` is any sequence of ``(w, h)``. Global ids follow ascending area,
    so id 0 is the smallest prior.
    """
    sizes = np.asarray(sizes, dtype=np.float64).reshape(-1, 2)
    if len(sizes) != PRIORS_PER_SCALE * len(strides):
        raise ValueError(f"need {PRIORS_PER_SCALE * len(strides)} prior sizes, got {len(sizes)}")
    order = np.argsort(sizes[:, 0] * sizes[:, 1], kind="stable")
    scales_fine_first = sorted(range(len(strides)), key=lambda i: strides[i])
    priors = []
    for gid, idx in enumerate(order):
        scale = scales_fine_first[gid // PRIORS_PER_SCALE]
        priors.append(PriorBox(float(sizes[idx, 0]), float(sizes[idx, 1]), scale, gid % PRIORS_PER_SCALE, gid))
    return priors


def priors_for_scale(priors, scale_index):
    out = sorted((p for p in priors if p.scale_index == scale_index), key=lambda p: p.index_in_scale)
    return out


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return min(inter / (a.area + b.area - inter), 1.0)


def iou_matrix(a, b):
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` arrays of ``cx, cy, w, h``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a0, a1 = a[:, None, :2] - a[:, None, 2:] / 2, a[:, None, :2] + a[:, None, 2:] / 2
    b0, b1 = b[None, :, :2] - b[None, :, 2:] / 2, b[None, :, :2] + b[None, :, 2:] / 2
    wh = np.clip(np.minimum(a1, b1) - np.maximum(a0, b0), 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = (a[:, None, 2] * a[:, None, 3]) + (b[None, :, 2] * b[None, :, 3]) - inter
    return np.minimum(inter / union, 1.0)


def size_iou(wh, centroids):
    """IoU of boxes sharing a centre: ``(n, 2)`` sizes vs ``(k, 2)`` sizes."""
    wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
    centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    inter = np.minimum(wh[:, None, 0], centroids[None, :, 0]) * np.minimum(wh[:, None, 1], centroids[None, :, 1])
    union = wh[:, None, 0] * wh[:, None, 1] + centroids[None, :, 0] * centroids[None, :, 1] - inter
    return inter / union


# ---------------------------------------------------------------------------
# box codec
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def decode_box(raw, cell, prior, stride) -> BBox:
    """Map raw ``(y*_x, y*_y, y*_w, y*_h)`` of one slot to a pixel-space box."""
    tx, ty, tw, th = (float(v) for v in raw)
    cx, cy = cell
    return BBox(
        float((_sigmoid(tx) + cx) * stride),
        float((_sigmoid(ty) + cy) * stride),
        prior.pw * math.exp(tw),
        prior.ph * math.exp(th),
    )


def decode_boxes(raw, stride, pw, ph):
    """Vectorised decode of a ``(h, w, P, 4)`` raw grid to ``(h, w, P, 4)`` boxes."""
    raw = np.asarray(raw, dtype=np.float64)
    h, w = raw.shape[:2]
    cy, cx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.empty_like(raw)
    out[..., 0] = (_sigmoid(raw[..., 0]) + cx[..., None]) * stride
    out[..., 1] = (_sigmoid(raw[..., 1]) + cy[..., None]) * stride
    out[..., 2] = np.asarray(pw) * np.exp(raw[..., 2])
    out[..., 3] = np.asarray(ph) * np.exp(raw[..., 3])
    return out


def _logit(p):
    return math.log(p) - math.log1p(-p)


def encode_ground_truth(box: BBox, cell, prior, stride):
    """Invert :func:`decode_box` for a ground-truth box whose centre lies in ``cell``."""
    cx, cy = cell
    fx = box.cx / stride - cx
    fy = box.cy / stride - cy
    if not (0.0 <= fx <= 1.0 and 0.0 <= fy <= 1.0):
        raise ValueError(f"box centre ({box.cx}, {box.cy}) is outside cell {cell} at stride {stride}")
    fx = min(max(fx, LOGIT_EPS), 1.0 - LOGIT_EPS)
    fy = min(max(fy, LOGIT_EPS), 1.0 - LOGIT_EPS)
    return (_logit(fx), _logit(fy), math.log(box.w / prior.pw), math.log(box.h / prior.ph))


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------


@dataclass
class Slot:
    scale_index: int
    cell_y: int
    cell_x: int
    prior_index: int
    global_prior_id: int


@dataclass
class Assignment:
    slots: dict  # gt index -> Slot
    dropped: list

    def slot_of(self, gt_index):
        return self.slots.get(gt_index)


def rank_priors(box: BBox, priors):
    """Priors ordered by descending centred IoU with ``box``; ties by lower global id."""
    ious = size_iou([[box.w, box.h]], [[p.pw, p.ph] for p in priors])[0]
    return sorted(range(len(priors)), key=lambda i: (-ious[i], priors[i].global_id))


def assign_ground_truth(gts, geom: GridGeometry, priors) -> Assignment:
    """Give each ground truth the best free (scale, cell, prior) slot.

    ``gts`` holds objects with a ``bbox`` attribute or plain :class:`BBox`
    values. A gt whose every candidate slot is taken is dropped.
    """
    taken = set()
    slots, dropped = {}, []
    for gi, gt in enumerate(gts):
        box = getattr(gt, "bbox", gt)
        for pi in rank_priors(box, priors):
            p = priors[pi]
            row, col = geom.cell_of(p.scale_index, box.cx, box.cy)
            key = (p.scale_index, row, col, p.index_in_scale)
            if key in taken:
                continue
            taken.add(key)
            slots[gi] = Slot(p.scale_index, row, col, p.index_in_scale, p.global_id)
            break
        else:
            dropped.append(gi)
    return Assignment(slots, dropped)


# ---------------------------------------------------------------------------
# k-means priors
# ---------------------------------------------------------------------------


def _kmeans_pp_init(wh, k, rng):
    n = len(wh)
    centroids = [wh[rng.integers(n)]]
    for _ in range(1, k):
        d = (1.0 - size_iou(wh, np.array(centroids))).min(axis=1)
        d2 = d * d
        total = d2.sum()
        if total <= 0:
            # remaining boxes coincide with chosen centroids; take any unused distinct size
            used = {tuple(c) for c in centroids}
            cand = [i for i in range(n) if tuple(wh[i]) not in used]
            centroids.append(wh[cand[rng.integers(len(cand))]])
            continue
        centroids.append(wh[rng.choice(n, p=d2 / total)])
    return np.array(centroids, dtype=np.float64)


def kmeans_objective(wh, centroids):
    d = 1.0 - size_iou(wh, centroids)
    return float(d.min(axis=1).mean())


def _lloyd(wh, k, max_iters, rng):
    centroids = _kmeans_pp_init(wh, k, rng)
    labels = None
    history = [kmeans_objective(wh, centroids)]
    for _ in range(max_iters):
        dist = 1.0 - size_iou(wh, centroids)
        new_labels = dist.argmin(axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = wh[labels == j]
            if len(members) == 0:
                far = dist.min(axis=1).argmax()
                centroids[j] = wh[far]
                dist[far] = 0.0
                continue
            candidate = members.mean(axis=0)
            # the mean is not the exact 1-IoU minimiser; keep whichever is better
            old = (1.0 - size_iou(members, centroids[j])).sum()
            new = (1.0 - size_iou(members, candidate)).sum()
            if new <= old:
                centroids[j] = candidate
        history.append(kmeans_objective(wh, centroids))
    return centroids, history


def kmeans_priors(boxes, k, max_iters=300, seed=0, return_history=False, n_init=10):
    """Cluster box sizes under the ``1 - IoU`` distance.

    Runs ``n_init`` seeded restarts and keeps the lowest final objective
    (earliest restart on ties). Returns ``k`` centroids sorted by ascending
    area; with ``return_history=True`` also the objective after every
    iteration of the kept restart.
    """
    wh = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    n_distinct = len(np.unique(wh, axis=0))
    if k < 1 or k > n_distinct:
        raise ValueError(f"k={k} exceeds the {n_distinct} distinct box sizes")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centroids, history = _lloyd(wh, k, max_iters, rng)
        if best is None or history[-1] < best[1][-1]:
            best = (centroids, history)
    centroids, history = best
    centroids = centroids[np.argsort(centroids[:, 0] * centroids[:, 1], kind="stable")]
    if return_history:
        return centroids, history
    return centroids
