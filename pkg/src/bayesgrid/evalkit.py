"""Detection metrics (matching, MR/FPPI, LAMR) and per-prior uncertainty analyses.

Every analysis keys its results by global prior id: uncertainties from
different priors are not calibrated against each other, so nothing here
averages a measure across priors.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from bayesgrid.geometry import assign_ground_truth, iou, iou_matrix

TP, FP, IGNORED = "tp", "fp", "ignored"
MATCHED, MISSED = "matched", "missed"

MEASURES = (
    "alea_x", "alea_y", "alea_w", "alea_h",
    "epi_x", "epi_y", "epi_w", "epi_h",
    "total", "class_mi", "objectness_mi",
)


@dataclass
class EvalSettings:
    iou_match_threshold: float = 0.5
    min_gt_height: float = 12.0
    ignore_classes: frozenset = frozenset()
    eval_classes: frozenset = None  # None: every class not ignored
    fppi_range: tuple = (1e-2, 1e0)
    fppi_points: int = 9
    extend: str = "lowest"  # or "one": miss rate 1 below the curve's reach


@dataclass
class CurvePoint:
    score_threshold: float
    miss_rate: float
    fppi: float


@dataclass
class MatchResult:
    det_scores: np.ndarray
    det_status: list
    det_gt: list
    gt_status: list

    @property
    def n_countable(self):
        return sum(1 for s in self.gt_status if s != IGNORED)

    @property
    def n_tp(self):
        return self.det_status.count(TP)

    @property
    def n_fp(self):
        return self.det_status.count(FP)


def is_countable(gt, settings: EvalSettings):
    if gt.ignore or gt.bbox.h < settings.min_gt_height or gt.class_id in settings.ignore_classes:
        return False
    return settings.eval_classes is None or gt.class_id in settings.eval_classes


def match(dets, gts, settings: EvalSettings = None) -> MatchResult:
    """Greedy matching of one image's detections in descending score order.

    A detection takes the unmatched countable gt of its class with the highest
    IoU at or above the threshold. Failing that, overlapping a non-countable
    gt (ignore flag, too small, ignored class) makes it ignored; otherwise it
    is a false positive.
    """
    settings = settings or EvalSettings()
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].provenance.key()))
    countable = [is_countable(g, settings) for g in gts]
    gt_status = [MISSED if c else IGNORED for c in countable]
    status = [None] * len(dets)
    det_gt = [None] * len(dets)
    ious = (iou_matrix([d.bbox.as_array() for d in dets], [g.bbox.as_array() for g in gts])
            if dets and gts else np.zeros((len(dets), len(gts))))
    thr = settings.iou_match_threshold
    for i in order:
        d = dets[i]
        if settings.eval_classes is not None and d.class_id not in settings.eval_classes:
            status[i] = IGNORED
            continue
        best, best_iou = None, thr
        for j, g in enumerate(gts):
            if countable[j] and gt_status[j] == MISSED and g.class_id == d.class_id and ious[i, j] >= best_iou:
                if best is None or ious[i, j] > best_iou:
                    best, best_iou = j, ious[i, j]
        if best is not None:
            gt_status[best] = MATCHED
            status[i], det_gt[i] = TP, best
            continue
        absorbed = [j for j in range(len(gts)) if not countable[j] and ious[i, j] >= thr]
        if absorbed:
            status[i] = IGNORED
            det_gt[i] = max(absorbed, key=lambda j: ious[i, j])
        else:
            status[i] = FP
    return MatchResult(np.array([d.score for d in dets], dtype=np.float64), status, det_gt, gt_status)


def mr_fppi_curve(matches, n_images, thresholds=None):
    """Miss rate and false positives per image at each score threshold.

    Thresholds default to every distinct detection score, plus one above the
    maximum so the curve starts at zero detections.
    """
    if n_images < 1:
        raise ValueError("need at least one image")
    n_gt = sum(m.n_countable for m in matches)
    if n_gt == 0:
        raise ValueError("no countable ground truth; miss rate is undefined")
    scores = np.concatenate([m.det_scores for m in matches]) if matches else np.zeros(0)
    status = [s for m in matches for s in m.det_status]
    tp_scores = np.sort(scores[[s == TP for s in status]]) if len(scores) else np.zeros(0)
    fp_scores = np.sort(scores[[s == FP for s in status]]) if len(scores) else np.zeros(0)
    if thresholds is None:
        top = scores.max() if len(scores) else 1.0
        thresholds = np.concatenate([[np.nextafter(top, np.inf)], np.unique(scores)[::-1]])
    thresholds = np.sort(np.asarray(thresholds, dtype=np.float64))[::-1]
    tp = len(tp_scores) - np.searchsorted(tp_scores, thresholds, side="left")
    fp = len(fp_scores) - np.searchsorted(fp_scores, thresholds, side="left")
    return [CurvePoint(float(t), 1.0 - a / n_gt, b / n_images) for t, a, b in zip(thresholds, tp, fp)]


def lamr(curve, settings: EvalSettings = None):
    """Geometric mean of miss rates at log-spaced FPPI reference points."""
    settings = settings or EvalSettings()
    if not curve:
        raise ValueError("empty curve")
    fppi = np.array([c.fppi for c in curve])
    mr = np.array([c.miss_rate for c in curve])
    refs = np.logspace(math.log10(settings.fppi_range[0]), math.log10(settings.fppi_range[1]), settings.fppi_points)
    lo = fppi.min()
    fallback = mr[fppi == lo].min() if settings.extend == "lowest" else 1.0
    sampled = []
    for r in refs:
        reach = fppi <= r
        sampled.append(mr[reach].min() if reach.any() else fallback)
    sampled = np.maximum(np.array(sampled), 1e-10)
    return float(np.exp(np.mean(np.log(sampled))))


def recall_at_fppi(curve, fppi_level=1.0):
    reach = [c for c in curve if c.fppi <= fppi_level]
    if not reach:
        return 0.0
    return 1.0 - min(c.miss_rate for c in reach)


def evaluate_detections(dets_by_image, gts_by_image, settings: EvalSettings = None):
    """Match every image and return ``(matches, curve, lamr)``."""
    settings = settings or EvalSettings()
    keys = list(gts_by_image)
    matches = [match(dets_by_image.get(k, []), gts_by_image[k], settings) for k in keys]
    curve = mr_fppi_curve(matches, len(keys))
    return matches, curve, lamr(curve, settings)


# ---------------------------------------------------------------------------
# correlation
# ---------------------------------------------------------------------------


def pearson(x, y):
    """Product-moment ``r`` and its two-sided p-value (Student t, ``n - 2`` dof)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n != len(y):
        raise ValueError("x and y must have equal length")
    if n < 3:
        raise ValueError("need at least 3 pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("zero variance input")
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    df = n - 2
    if abs(r) == 1.0:
        return r, 0.0
    t2 = r * r * df / (1.0 - r * r)
    p = float(special.betainc(0.5 * df, 0.5, df / (df + t2)))
    return r, p


def format_p(p):
    return "<0.001" if p < 1e-3 else f"{p:.3f}"


@dataclass
class PriorCorrelation:
    prior: int
    count: int
    results: dict = field(default_factory=dict)  # measure -> (r, p) or None


def responsible_outputs(assignments, summaries, gts):
    """Per assigned gt: ``(prior id, occlusion level, slot summary values)``."""
    rows = []
    for assignment, per_scale, gt_list in zip(assignments, summaries, gts):
        for gi, slot in assignment.slots.items():
            s = per_scale[slot.scale_index]
            idx = (slot.cell_y, slot.cell_x, slot.prior_index)
            rows.append((slot.global_prior_id, gt_list[gi].occlusion_level, s.aleatoric_var[idx], s.epistemic_var[idx]))
    return rows


def occlusion_correlation(assignments, summaries, gts, min_count=3):
    """Pearson r between occlusion level and the responsible slot's variances, per prior.

    Measures: aleatoric and epistemic variance of ``w`` and ``h``. A measure
    is ``None`` when the prior has fewer than ``min_count`` objects or either
    side has zero variance.
    """
    rows = responsible_outputs(assignments, summaries, gts)
    table = {}
    for prior in sorted({r[0] for r in rows}):
        sel = [r for r in rows if r[0] == prior]
        occ = [r[1] for r in sel]
        entry = PriorCorrelation(prior, len(sel))
        series = {
            "alea_w": [r[2][2] for r in sel], "alea_h": [r[2][3] for r in sel],
            "epi_w": [r[3][2] for r in sel], "epi_h": [r[3][3] for r in sel],
        }
        for name, vals in series.items():
            try:
                entry.results[name] = pearson(occ, vals) if len(sel) >= min_count else None
            except ValueError:
                entry.results[name] = None
        table[prior] = entry
    return table


def assign_for_analysis(gts_per_image, geom, priors):
    return [assign_ground_truth(g, geom, priors) for g in gts_per_image]


# ---------------------------------------------------------------------------
# IoU vs uncertainty
# ---------------------------------------------------------------------------


def _measures(det):
    a, e = det.aleatoric_var, det.epistemic_var
    return {
        "alea_x": a[0], "alea_y": a[1], "alea_w": a[2], "alea_h": a[3],
        "epi_x": e[0], "epi_y": e[1], "epi_w": e[2], "epi_h": e[3],
        "total": float(np.mean(det.total_var)),
        "class_mi": det.class_mi, "objectness_mi": det.objectness_mi,
    }


def iou_uncertainty_bins(dets, gts_by_image, bin_width=0.1):
    """Mean of each uncertainty measure per (prior, IoU bin).

    Each detection is binned by its highest IoU with any gt of its image;
    the last bin is closed at 1. Returns ``{prior: {bin_index: {measure:
    mean, "count": n}}}`` together with the bin edges.
    """
    nbins = round(1.0 / bin_width)
    if nbins < 1 or abs(nbins * bin_width - 1.0) > 1e-9:
        raise ValueError("bin_width must divide 1")
    edges = np.linspace(0.0, 1.0, nbins + 1)
    acc = {}
    for d in dets:
        gts = gts_by_image.get(d.provenance.image, [])
        best = max((iou(d.bbox, g.bbox) for g in gts), default=0.0)
        b = min(int(best / bin_width + 1e-12), nbins - 1)
        slot = acc.setdefault(d.provenance.prior, {}).setdefault(b, {"count": 0, **{m: 0.0 for m in MEASURES}})
        slot["count"] += 1
        for m, v in _measures(d).items():
            slot[m] += v
    for per_bin in acc.values():
        for slot in per_bin.values():
            for m in MEASURES:
                slot[m] /= slot["count"]
    return acc, edges


def background_mask(geom, scale_index, gts):
    """Cells of one scale whose footprint touches no gt box (ignored ones included)."""
    g = geom.scales[scale_index]
    free = np.ones((g.height, g.width), dtype=bool)
    for gt in gts:
        x0, y0, x1, y1 = gt.bbox.corners
        c0, c1 = int(max(math.floor(x0 / g.stride), 0)), int(min(math.ceil(x1 / g.stride), g.width))
        r0, r1 = int(max(math.floor(y0 / g.stride), 0)), int(min(math.ceil(y1 / g.stride), g.height))
        free[r0:r1, c0:c1] = False
    return free


def objectness_mi_contrast(summaries, dets_by_image, gts_by_image, geom, priors, settings: EvalSettings = None):
    """Objectness MI values of true-positive detections and of background slots.

    Returns two dicts keyed by global prior id, each mapping to a list of
    MI values. Summaries must be in the order of ``gts_by_image``.
    """
    settings = settings or EvalSettings()
    fg, bg = {}, {}
    for key, per_scale in zip(gts_by_image, summaries):
        dets = dets_by_image.get(key, [])
        m = match(dets, gts_by_image[key], settings)
        for d, st in zip(dets, m.det_status):
            if st == TP:
                fg.setdefault(d.provenance.prior, []).append(d.objectness_mi)
        for si, s in enumerate(per_scale):
            free = background_mask(geom, si, gts_by_image[key])
            for p in (q for q in priors if q.scale_index == si):
                bg.setdefault(p.global_id, []).extend(s.obj_mi[..., p.index_in_scale][free].tolist())
    return fg, bg


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def write_curve_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["score_threshold", "miss_rate", "fppi"])
        for c in curve:
            w.writerow([repr(c.score_threshold), repr(c.miss_rate), repr(c.fppi)])


def write_correlation_csv(path, table):
    measures = ("alea_w", "alea_h", "epi_w", "epi_h")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["prior", "count"] + [f"{m}_{k}" for m in measures for k in ("r", "p")])
        for prior, entry in sorted(table.items()):
            row = [prior, entry.count]
            for m in measures:
                res = entry.results.get(m)
                row += ["", ""] if res is None else [f"{res[0]:.6f}", format_p(res[1])]
            w.writerow(row)


def correlation_report(table):
    """Plain-text table with one column per prior."""
    priors = sorted(table)
    lines = ["measure   " + "".join(f"{'prior' + str(p + 1):>10}" for p in priors)]
    for m in ("alea_w", "alea_h", "epi_w", "epi_h"):
        rs, ps = [], []
        for p in priors:
            res = table[p].results.get(m)
            rs.append(f"{res[0]:>10.3f}" if res else f"{'-':>10}")
            ps.append(f"{format_p(res[1]):>10}" if res else f"{'-':>10}")
        lines.append(f"{m + ' r':<10}" + "".join(rs))
        lines.append(f"{m + ' p':<10}" + "".join(ps))
    lines.append(f"{'count':<10}" + "".join(f"{table[p].count:>10}" for p in priors))
    return "\n".join(lines)


def write_bins_csv(path, bins, edges):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["prior", "iou_lo", "iou_hi", "count", *MEASURES])
        for prior in sorted(bins):
            for b in sorted(bins[prior]):
                slot = bins[prior][b]
                w.writerow([prior, f"{edges[b]:.3f}", f"{edges[b + 1]:.3f}", slot["count"]]
                           + [repr(slot[m]) for m in MEASURES])


def metrics_report(curve, lamr_value, n_images, n_gt):
    return "\n".join([
        f"images           {n_images}",
        f"countable gts    {n_gt}",
        f"LAMR             {lamr_value:.4f}",
        f"recall@FPPI=1    {recall_at_fppi(curve, 1.0):.4f}",
        f"recall@FPPI=0.1  {recall_at_fppi(curve, 0.1):.4f}",
    ])
