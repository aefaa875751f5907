"""Monte Carlo dropout aggregation.

Given ``T`` stochastic passes, regression outputs are summarised by their
mean, the spread across passes (epistemic variance) and the average
predicted variance (aleatoric). Classification outputs are averaged as
probabilities; the mutual information between prediction and weights is
``H[mean p] - mean H[p]``. All entropies are in nats.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from bayesgrid.errors import DataError
from bayesgrid.loss import S_CLIP
from bayesgrid.network import forward_shared_backbone, forward

MI_CLAMP = 1e-12
REG_DIMS = ("x", "y", "w", "h")


@dataclass(frozen=True)
class McConfig:
    T: int = 50
    base_seed: int = 0
    deterministic: bool = False
    ddof: int = 0  # 0: population variance, 1: sample variance

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")


@dataclass
class PredictiveSummary:
    """Per-slot summary of one output scale; arrays are ``(h, w, P, ...)``."""

    mean: np.ndarray
    epistemic_var: np.ndarray
    aleatoric_var: np.ndarray
    total_var: np.ndarray
    obj_prob: np.ndarray
    obj_mi: np.ndarray
    cls_prob: np.ndarray
    cls_mi: np.ndarray

    @property
    def grid_shape(self):
        return self.obj_prob.shape


# ---------------------------------------------------------------------------
# elementary estimators
# ---------------------------------------------------------------------------


def _pass_mean(x):
    """Mean over passes, computed relative to the first pass so equal passes reproduce it exactly."""
    return x[0] + (x - x[0]).mean(axis=0)


def predictive_mean_reg(samples):
    """Mean over the leading (pass) axis."""
    samples = np.asarray(samples, dtype=np.float64)
    return _pass_mean(samples)


def epistemic_variance(samples, ddof=0):
    samples = np.asarray(samples, dtype=np.float64)
    t = samples.shape[0]
    if t - ddof < 1:
        return np.zeros(samples.shape[1:])
    # shift by the first pass so identical samples give exactly zero
    d = samples - samples[0]
    centered = d - d.mean(axis=0)
    return (centered * centered).sum(axis=0) / (t - ddof)


def variance_decomposition(samples, aleatoric_samples=None, ddof=0):
    """Return ``(epistemic, aleatoric, total)`` variances per dimension.

    ``aleatoric_samples`` are the per-pass predicted variances; ``None``
    means the model predicts none and the aleatoric part is zero.
    """
    epi = epistemic_variance(samples, ddof)
    if aleatoric_samples is None:
        alea = np.zeros_like(epi)
    else:
        aleatoric_samples = np.asarray(aleatoric_samples, dtype=np.float64)
        if np.any(aleatoric_samples < 0):
            raise ValueError("aleatoric variance samples must be non-negative")
        alea = _pass_mean(aleatoric_samples)
    return epi, alea, epi + alea


def _as_distribution(prob_samples):
    p = np.asarray(prob_samples, dtype=np.float64)
    if p.ndim == 1:  # scalar Bernoulli probabilities
        p = np.stack([p, 1.0 - p], axis=-1)
    return p


def predictive_cls(prob_samples):
    """Average of per-pass probabilities (not the softmax of averaged logits)."""
    raw = np.asarray(prob_samples, dtype=np.float64)
    p = _as_distribution(raw)
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("probability samples must sum to 1 along the last axis")
    out = _pass_mean(p)
    return out[..., 0] if raw.ndim == 1 else out


def _entropy(p, axis=-1):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


def entropy(p):
    """Shannon entropy in nats with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("entropy: probabilities must be non-negative")
    return _entropy(p)


def mutual_information(prob_samples):
    """``H[mean p] - mean H[p]`` over passes (leading axis), clamped at 0."""
    p = _as_distribution(prob_samples)
    mi = _entropy(_pass_mean(p)) - _pass_mean(_entropy(p))
    if np.any(mi < -MI_CLAMP):
        raise FloatingPointError(f"mutual information came out negative ({np.min(mi)})")
    mi = np.maximum(mi, 0.0)
    return mi if np.ndim(mi) else float(mi)


def _binary_mi(probs):
    """MI for Bernoulli samples ``(T, ...)`` without building a 2-vector."""
    def h(q):
        return _entropy(np.stack([q, 1.0 - q], axis=-1))

    return np.maximum(h(_pass_mean(probs)) - _pass_mean(h(probs)), 0.0)


# ---------------------------------------------------------------------------
# grid summaries
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def summarize_samples(samples, layout, ddof=0):
    """Aggregate raw samples ``(T, h, w, P, D)`` of one scale."""
    samples = np.asarray(samples, dtype=np.float64)
    box = samples[..., layout.box]
    alea_samples = None
    if layout.aleatoric:
        alea_samples = np.exp(np.clip(samples[..., layout.logvar], -S_CLIP, S_CLIP))
    epi, alea, total = variance_decomposition(box, alea_samples, ddof)
    obj = _sigmoid(samples[..., layout.obj])
    cls = _softmax(samples[..., layout.cls])
    cls_mean = _pass_mean(cls)
    cls_mi = np.maximum(_entropy(cls_mean) - _pass_mean(_entropy(cls)), 0.0)
    return PredictiveSummary(
        mean=predictive_mean_reg(box),
        epistemic_var=epi,
        aleatoric_var=alea,
        total_var=total,
        obj_prob=_pass_mean(obj),
        obj_mi=_binary_mi(obj),
        cls_prob=cls_mean,
        cls_mi=cls_mi,
    )


def mc_samples(net, images, mc: McConfig):
    """Raw samples per scale ``(B, T, h, w, P, D)`` for a batch of images."""
    images = np.asarray(images, dtype=np.float64)
    if mc.deterministic:
        outs = forward(net, images, mode="deterministic")
        return [o[:, None] for o in outs]
    if net.config.dropout_rate == 0 or net.config.dropout_layers_per_head == 0:
        # every pass is the same function; repeat one pass so spreads are exactly zero
        outs = forward(net, images, mode="deterministic")
        return [np.repeat(o[:, None], mc.T, axis=1) for o in outs]
    return forward_shared_backbone(net, images, mc.T, mc.base_seed)


def summarize(net, image, mc: McConfig):
    """Per-scale :class:`PredictiveSummary` for one ``(C, H, W)`` image."""
    return summarize_batch(net, np.asarray(image)[None], mc)[0]


def summarize_batch(net, images, mc: McConfig, chunk=8):
    """Summaries for every image of a ``(B, C, H, W)`` batch."""
    if mc.T < 1:
        raise ValueError("T must be >= 1")
    layout = net.config.layout
    result = []
    for start in range(0, len(images), chunk):
        per_scale = mc_samples(net, images[start : start + chunk], mc)
        for b in range(per_scale[0].shape[0]):
            result.append([summarize_samples(s[b], layout, mc.ddof) for s in per_scale])
    return result


# ---------------------------------------------------------------------------
# CSV dump
# ---------------------------------------------------------------------------


def summary_columns(num_classes):
    cols = ["image", "scale", "cell_y", "cell_x", "prior", "global_prior"]
    for kind in ("mean", "epi", "alea", "total"):
        cols += [f"{kind}_{d}" for d in REG_DIMS]
    cols += ["obj_prob", "obj_mi"] + [f"cls_prob_{k}" for k in range(num_classes)] + ["cls_mi"]
    return cols


def write_summary_csv(path, summaries, priors, image_ids=None):
    """One row per (image, scale, cell, prior) slot."""
    by_slot = {(p.scale_index, p.index_in_scale): p.global_id for p in priors}
    num_classes = summaries[0][0].cls_prob.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(summary_columns(num_classes))
        for i, per_scale in enumerate(summaries):
            img = image_ids[i] if image_ids is not None else i
            for si, s in enumerate(per_scale):
                h, wd, P = s.grid_shape
                for cy in range(h):
                    for cx in range(wd):
                        for p in range(P):
                            idx = (cy, cx, p)
                            row = [img, si, cy, cx, p, by_slot[(si, p)]]
                            for arr in (s.mean, s.epistemic_var, s.aleatoric_var, s.total_var):
                                row += [repr(float(v)) for v in arr[idx]]
                            row += [repr(float(s.obj_prob[idx])), repr(float(s.obj_mi[idx]))]
                            row += [repr(float(v)) for v in s.cls_prob[idx]]
                            row.append(repr(float(s.cls_mi[idx])))
                            w.writerow(row)


def read_summary_csv(path, geom, num_classes, priors_per_scale=3):
    """Inverse of :func:`write_summary_csv`; returns ``{image: [PredictiveSummary per scale]}``."""
    out = {}
    cols = summary_columns(num_classes)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != cols:
            raise DataError(f"{path}: unexpected summary header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(cols):
                raise DataError(f"{path}:{lineno}: expected {len(cols)} fields, got {len(row)}")
            img = row[0]
            if img not in out:
                out[img] = [_empty_summary(g.height, g.width, priors_per_scale, num_classes) for g in geom.scales]
            si, cy, cx, p = (int(v) for v in row[1:5])
            vals = [float(v) for v in row[6:]]
            s = out[img][si]
            idx = (cy, cx, p)
            s.mean[idx], s.epistemic_var[idx] = vals[0:4], vals[4:8]
            s.aleatoric_var[idx], s.total_var[idx] = vals[8:12], vals[12:16]
            s.obj_prob[idx], s.obj_mi[idx] = vals[16], vals[17]
            s.cls_prob[idx] = vals[18 : 18 + num_classes]
            s.cls_mi[idx] = vals[18 + num_classes]
    return out


def _empty_summary(h, w, P, c):
    z4 = lambda: np.zeros((h, w, P, 4))  # noqa: E731
    return PredictiveSummary(z4(), z4(), z4(), z4(), np.zeros((h, w, P)), np.zeros((h, w, P)),
                             np.zeros((h, w, P, c)), np.zeros((h, w, P)))
