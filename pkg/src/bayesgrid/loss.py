"""Likelihood-based detector losses.

Raw grids are tensors shaped ``(N, h, w, P, D)``. The last axis follows
:class:`RawLayout`: four box offsets, four log-variances when the aleatoric
head is on, one objectness logit, then one logit per class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bayesgrid import autodiff as ad
from bayesgrid.errors import ShapeError
from bayesgrid.geometry import encode_ground_truth, assign_ground_truth

S_CLIP = 40.0


@dataclass(frozen=True)
class RawLayout:
    num_classes: int
    aleatoric: bool

    @property
    def depth(self):
        return 4 + (4 if self.aleatoric else 0) + 1 + self.num_classes

    @property
    def box(self):
        return slice(0, 4)

    @property
    def logvar(self):
        return slice(4, 8) if self.aleatoric else None

    @property
    def obj(self):
        return 8 if self.aleatoric else 4

    @property
    def cls(self):
        return slice(self.obj + 1, self.obj + 1 + self.num_classes)


@dataclass
class ScaleTargets:
    """Training targets for one output scale, batch-first ``(N, h, w, P, ...)``."""

    loc: np.ndarray
    cls: np.ndarray
    obj: np.ndarray

    @property
    def positive(self):
        return self.obj > 0.5


@dataclass
class LossBreakdown:
    loc: float
    obj: float
    cls: float
    weight_decay: float
    total: float
    positives: int
    negatives: int
    tensor: ad.Tensor = None


# ---------------------------------------------------------------------------
# individual terms
# ---------------------------------------------------------------------------


def aleatoric_loc_loss(targets, pred, s):
    """Sum over entries of ``0.5 * exp(-s) * (y - f)^2 + 0.5 * s``.

    ``s`` is the predicted log-variance; callers clip it to ``[-40, 40]``.
    The additive ``2 log 2pi`` constant of the Gaussian NLL is omitted.
    """
    resid = ad.sub(ad.as_tensor(targets), pred)
    s = ad.as_tensor(s)
    term = ad.mul(ad.exp(ad.mul(s, -1.0)), ad.square(resid))
    return ad.mul(ad.tensor_sum(ad.add(term, s)), 0.5)


def l2_loc_loss(targets, pred):
    resid = ad.sub(ad.as_tensor(targets), pred)
    return ad.mul(ad.tensor_sum(ad.square(resid)), 0.5)


def objectness_loss(y_obj, logit):
    """Binary cross-entropy on logits, summed: ``softplus(z) - y * z``."""
    logit = ad.as_tensor(logit)
    y = np.asarray(y_obj, dtype=np.float64)
    return ad.tensor_sum(ad.sub(ad.softplus(logit), ad.mul(logit, y)))


def class_loss(one_hot, logits):
    """Softmax cross-entropy, summed over rows of ``one_hot``."""
    one_hot = np.asarray(one_hot, dtype=np.float64)
    if one_hot.shape != ad.as_tensor(logits).shape:
        raise ShapeError(f"class_loss: one-hot shape {one_hot.shape} != logits shape {ad.as_tensor(logits).shape}")
    if not (np.all((one_hot == 0) | (one_hot == 1)) and np.all(one_hot.sum(axis=-1) == 1)):
        raise ValueError("class_loss: each row must contain exactly one 1")
    return ad.mul(ad.tensor_sum(ad.mul(ad.log_softmax(logits), one_hot)), -1.0)


def weight_decay(params, lam):
    """``0.5 * lam * sum(w^2)`` over trainable, decayed parameters."""
    if lam < 0:
        raise ValueError("weight decay coefficient must be >= 0")
    terms = [ad.tensor_sum(ad.square(p)) for p in params if p.trainable and getattr(p, "decay", True)]
    if lam == 0 or not terms:
        return ad.Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 0.5 * lam)


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------


def build_targets(gt_batch, geom, priors, num_classes, priors_per_scale=3):
    """Assign and encode ground truth for a batch of images.

    Returns per-scale :class:`ScaleTargets` and the total number of dropped
    ground truths.
    """
    n = len(gt_batch)
    targets = [
        ScaleTargets(
            loc=np.zeros((n, g.height, g.width, priors_per_scale, 4)),
            cls=np.full((n, g.height, g.width, priors_per_scale), -1, dtype=np.int64),
            obj=np.zeros((n, g.height, g.width, priors_per_scale)),
        )
        for g in geom.scales
    ]
    by_id = {p.global_id: p for p in priors}
    dropped = 0
    for b, gts in enumerate(gt_batch):
        assignment = assign_ground_truth(gts, geom, priors)
        dropped += len(assignment.dropped)
        for gi, slot in assignment.slots.items():
            gt = gts[gi]
            stride = geom.scales[slot.scale_index].stride
            enc = encode_ground_truth(gt.bbox, (slot.cell_x, slot.cell_y), by_id[slot.global_prior_id], stride)
            t = targets[slot.scale_index]
            idx = (b, slot.cell_y, slot.cell_x, slot.prior_index)
            t.loc[idx] = enc
            t.cls[idx] = gt.class_id
            t.obj[idx] = 1.0
    return targets, dropped


# ---------------------------------------------------------------------------
# combined loss
# ---------------------------------------------------------------------------


def total_loss(raw_grids, targets, params, lam, mode="baseline", num_classes=None,
               loc_weight=1.0, obj_weight=1.0, cls_weight=1.0, balance_objectness=False):
    """Sum of localisation, objectness, class and weight-decay losses.

    ``mode="aleatoric"`` reads predicted log-variances from the raw grids;
    ``mode="baseline"`` fixes them at zero. Localisation and class losses are
    averaged over positive slots, objectness over all slots.
    """
    if mode not in ("baseline", "aleatoric"):
        raise ValueError(f"unknown loss mode {mode!r}")
    if len(raw_grids) != len(targets):
        raise ShapeError(f"{len(raw_grids)} raw grids for {len(targets)} target scales")
    aleatoric = mode == "aleatoric"
    if num_classes is None:
        num_classes = raw_grids[0].shape[-1] - (9 if aleatoric else 5)
    layout = RawLayout(num_classes, aleatoric)

    loc_terms, cls_terms, obj_pos, obj_neg = [], [], [], []
    n_pos = n_slots = 0
    for raw, t in zip(raw_grids, targets):
        if raw.shape[:-1] != t.obj.shape or raw.shape[-1] != layout.depth:
            raise ShapeError(f"raw grid {raw.shape} does not match targets {t.obj.shape} (depth {layout.depth})")
        n_slots += t.obj.size
        pos = np.nonzero(t.positive)
        n_here = len(pos[0])
        n_pos += n_here
        obj_logits = raw[..., layout.obj]
        if balance_objectness:
            obj_pos.append(ad.tensor_sum(ad.mul(objectness_elementwise(t.obj, obj_logits), t.positive)))
            obj_neg.append(ad.tensor_sum(ad.mul(objectness_elementwise(t.obj, obj_logits), ~t.positive)))
        else:
            obj_neg.append(objectness_loss(t.obj, obj_logits))
        if n_here == 0:
            continue
        rows = raw[pos]  # (n_here, D)
        pred = rows[:, layout.box]
        if aleatoric:
            s = ad.clip(rows[:, layout.logvar], -S_CLIP, S_CLIP)
            loc_terms.append(aleatoric_loc_loss(t.loc[pos], pred, s))
        else:
            loc_terms.append(l2_loc_loss(t.loc[pos], pred))
        one_hot = np.eye(num_classes)[t.cls[pos]]
        cls_terms.append(class_loss(one_hot, rows[:, layout.cls]))

    denom = max(n_pos, 1)
    loc = _sum(loc_terms) * (1.0 / denom)
    cls = _sum(cls_terms) * (1.0 / denom)
    if balance_objectness:
        n_neg = n_slots - n_pos
        obj = 0.5 * (_sum(obj_pos) * (1.0 / max(n_pos, 1)) + _sum(obj_neg) * (1.0 / max(n_neg, 1)))
    else:
        obj = _sum(obj_neg) * (1.0 / n_slots)
    wd = weight_decay(params, lam) if params else ad.Tensor(0.0)
    total = loc * loc_weight + obj * obj_weight + cls * cls_weight + wd
    parts = [float(loc_weight * loc.data), float(obj_weight * obj.data), float(cls_weight * cls.data), float(wd.data)]
    return LossBreakdown(
        loc=parts[0], obj=parts[1], cls=parts[2], weight_decay=parts[3], total=float(total.data),
        positives=n_pos, negatives=n_slots - n_pos, tensor=total,
    )


def objectness_elementwise(y_obj, logit):
    logit = ad.as_tensor(logit)
    return ad.sub(ad.softplus(logit), ad.mul(logit, np.asarray(y_obj, dtype=np.float64)))


def _sum(terms):
    if not terms:
        return ad.Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out
