"""Turn per-slot predictive summaries into scored, suppressed detections."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from bayesgrid.geometry import BBox, decode_boxes, iou_matrix, priors_for_scale

EVAL_SCORE_THRESHOLD = 0.01
DUMP_SCORE_THRESHOLD = 0.5
NMS_IOU = 0.5


@dataclass(frozen=True)
class Provenance:
    image: str
    scale: int
    cell_y: int
    cell_x: int
    prior: int  # global prior id

    def key(self):
        return (str(self.image), self.scale, self.cell_y, self.cell_x, self.prior)


@dataclass
class Detection:
    bbox: BBox
    class_id: int
    score: float
    objectness: float
    class_prob: float
    aleatoric_var: tuple
    epistemic_var: tuple
    total_var: tuple
    class_mi: float
    objectness_mi: float
    provenance: Provenance

    @property
    def mean_total_var(self):
        return float(np.mean(self.total_var))


def decode_all(summaries, geom, priors, score_threshold=EVAL_SCORE_THRESHOLD, image_id="0"):
    """Detections for every slot whose ``objectness * class_prob`` reaches the threshold.

    Boxes come from the predictive-mean raw outputs; variances stay in raw
    output space.
    """
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError("score threshold must lie in [0, 1]")
    dets = []
    for si, s in enumerate(summaries):
        stride = geom.scales[si].stride
        ps = priors_for_scale(priors, si)
        boxes = decode_boxes(s.mean, stride, [p.pw for p in ps], [p.ph for p in ps])
        cls = s.cls_prob.argmax(axis=-1)
        cls_p = np.take_along_axis(s.cls_prob, cls[..., None], axis=-1)[..., 0]
        score = s.obj_prob * cls_p
        for cy, cx, p in zip(*np.nonzero(score >= score_threshold)):
            idx = (cy, cx, p)
            b = boxes[idx]
            dets.append(Detection(
                bbox=BBox(float(b[0]), float(b[1]), float(b[2]), float(b[3])),
                class_id=int(cls[idx]),
                score=float(score[idx]),
                objectness=float(s.obj_prob[idx]),
                class_prob=float(cls_p[idx]),
                aleatoric_var=tuple(float(v) for v in s.aleatoric_var[idx]),
                epistemic_var=tuple(float(v) for v in s.epistemic_var[idx]),
                total_var=tuple(float(v) for v in s.total_var[idx]),
                class_mi=float(s.cls_mi[idx]),
                objectness_mi=float(s.obj_mi[idx]),
                provenance=Provenance(str(image_id), si, int(cy), int(cx), ps[p].global_id),
            ))
    return dets


def _rank_key(det, strategy):
    if strategy == "score":
        return (-det.score, det.provenance.key())
    if strategy == "variance":
        # prefer confident boxes with small regression variance
        return (-det.score / (1.0 + det.mean_total_var), det.provenance.key())
    raise ValueError(f"unknown NMS strategy {strategy!r}")


def nms(dets, iou_threshold=NMS_IOU, strategy="score"):
    """Greedy per-class suppression of boxes overlapping a kept box by more than the threshold."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou threshold must lie in (0, 1]")
    ordered = sorted(dets, key=lambda d: _rank_key(d, strategy))
    kept = []
    for cls in sorted({d.class_id for d in ordered}):
        group = [d for d in ordered if d.class_id == cls]
        boxes = np.array([d.bbox.as_array() for d in group])
        ious = iou_matrix(boxes, boxes)
        alive = np.ones(len(group), dtype=bool)
        for i in range(len(group)):
            if not alive[i]:
                continue
            kept.append(group[i])
            alive[i + 1 :] &= ious[i, i + 1 :] <= iou_threshold
    return sorted(kept, key=lambda d: _rank_key(d, strategy))


def postprocess(summaries, geom, priors, image_id="0", score_threshold=EVAL_SCORE_THRESHOLD,
                iou_threshold=NMS_IOU, strategy="score"):
    return nms(decode_all(summaries, geom, priors, score_threshold, image_id), iou_threshold, strategy)


# ---------------------------------------------------------------------------
# dumps
# ---------------------------------------------------------------------------

DUMP_FIELDS = (
    "image", "class_id", "score", "objectness", "class_prob", "cx", "cy", "w", "h",
    "alea_x", "alea_y", "alea_w", "alea_h", "epi_x", "epi_y", "epi_w", "epi_h",
    "total_x", "total_y", "total_w", "total_h", "class_mi", "objectness_mi",
    "scale", "cell_y", "cell_x", "prior",
)


def _record(d):
    p = d.provenance
    return dict(zip(DUMP_FIELDS, (
        p.image, d.class_id, d.score, d.objectness, d.class_prob,
        d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h,
        *d.aleatoric_var, *d.epistemic_var, *d.total_var, d.class_mi, d.objectness_mi,
        p.scale, p.cell_y, p.cell_x, p.prior,
    )))


def dump_order(dets):
    return sorted(dets, key=lambda d: (str(d.provenance.image), -d.score, d.provenance.key()))


def write_detections_csv(path, dets):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DUMP_FIELDS)
        for d in dump_order(dets):
            rec = _record(d)
            w.writerow([repr(v) if isinstance(v, float) else v for v in rec.values()])


def write_detections_jsonl(path, dets):
    with open(path, "w") as fh:
        for d in dump_order(dets):
            fh.write(json.dumps(_record(d), sort_keys=False) + "\n")


def _from_record(rec):
    f = lambda k: float(rec[k])  # noqa: E731
    return Detection(
        bbox=BBox(f("cx"), f("cy"), f("w"), f("h")),
        class_id=int(rec["class_id"]),
        score=f("score"),
        objectness=f("objectness"),
        class_prob=f("class_prob"),
        aleatoric_var=tuple(f(f"alea_{k}") for k in "xywh"),
        epistemic_var=tuple(f(f"epi_{k}") for k in "xywh"),
        total_var=tuple(f(f"total_{k}") for k in "xywh"),
        class_mi=f("class_mi"),
        objectness_mi=f("objectness_mi"),
        provenance=Provenance(str(rec["image"]), int(rec["scale"]), int(rec["cell_y"]), int(rec["cell_x"]), int(rec["prior"])),
    )


def read_detections_csv(path):
    with open(path, newline="") as fh:
        return [_from_record(r) for r in csv.DictReader(fh)]


def read_detections_jsonl(path):
    with open(path) as fh:
        return [_from_record(json.loads(line)) for line in fh if line.strip()]
