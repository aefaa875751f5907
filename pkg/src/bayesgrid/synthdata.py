"""Deterministic synthetic street-scene generator with occlusion labels.

Scenes are grayscale. Pedestrians are tall bright rectangles; riders are a
shorter rectangle sitting on a disc. Occluders are textured slabs drawn over
the bottom or one side of an object. Annotated boxes always cover the full
object extent, and the occluded fraction is counted exactly from pixel masks.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, asdict, field

import numpy as np

from bayesgrid.errors import DataError
from bayesgrid.geometry import BBox, GroundTruth, occlusion_level

CLASS_NAMES = ("pedestrian", "rider")
REGIMES = ("day", "night")
_SPLIT_CODES = {"train": 1, "val": 2, "test": 3}


@dataclass
class SceneConfig:
    image_size: tuple = (64, 64)
    objects_per_image: tuple = (1, 3)
    class_probs: tuple = (0.7, 0.3)
    pedestrian_height: tuple = (10.0, 44.0)
    pedestrian_aspect: tuple = (0.32, 0.5)
    rider_height: tuple = (14.0, 40.0)
    rider_aspect: tuple = (0.55, 0.8)
    occluder_density: float = 0.5
    clutter_per_image: tuple = (0, 2)
    noise_sigma: float = 0.04
    regime: str = "day"
    ignore_above_fraction: float = 0.95
    seed: int = 0
    split: str = "train"
    max_retries: int = 50

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        for name in ("objects_per_image", "class_probs", "pedestrian_height", "pedestrian_aspect",
                     "rider_height", "rider_aspect", "clutter_per_image"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if abs(sum(self.class_probs) - 1.0) > 1e-9:
            raise ValueError("class_probs must sum to 1")

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Annotation:
    class_id: int
    bbox: BBox
    occlusion_fraction: float
    occlusion_level: int
    ignore: bool = False

    def to_ground_truth(self):
        return GroundTruth(self.bbox, self.class_id, self.occlusion_level, self.ignore, self.occlusion_fraction)


# ---------------------------------------------------------------------------
# rendering helpers
# ---------------------------------------------------------------------------


def _pixel_centres(h, w):
    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    return ys[:, None], xs[None, :]


def _rect_mask(h, w, x0, y0, x1, y1):
    ys, xs = _pixel_centres(h, w)
    return (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)


def _disc_mask(h, w, cx, cy, r):
    ys, xs = _pixel_centres(h, w)
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r


def _object_mask(h, w, cls, box):
    x0, y0, x1, y1 = box.corners
    if cls == 0:
        return _rect_mask(h, w, x0, y0, x1, y1)
    # rider: torso on the upper part, wheel touching the bottom edge
    r = min(box.w, box.h) * 0.45
    torso = _rect_mask(h, w, box.cx - box.w * 0.3, y0, box.cx + box.w * 0.3, y1 - r)
    wheel = _disc_mask(h, w, box.cx, y1 - r, r)
    frame = _rect_mask(h, w, x0, y1 - r - 1.0, x1, y1 - r + 1.0)
    return torso | wheel | frame


def _sample_box(rng, cfg, cls):
    H, W = cfg.image_size
    lo, hi = cfg.pedestrian_height if cls == 0 else cfg.rider_height
    alo, ahi = cfg.pedestrian_aspect if cls == 0 else cfg.rider_aspect
    h = rng.uniform(lo, hi)
    w = h * rng.uniform(alo, ahi)
    if h >= H - 1 or w >= W - 1:
        return None
    cx = rng.uniform(w / 2 + 0.5, W - w / 2 - 0.5)
    cy = rng.uniform(h / 2 + 0.5, H - h / 2 - 0.5)
    return BBox(cx, cy, w, h)


def _overlaps(box, others, margin=1.0):
    x0, y0, x1, y1 = box.corners
    for o in others:
        a0, b0, a1, b1 = o.corners
        if x0 - margin < a1 and a0 < x1 + margin and y0 - margin < b1 and b0 < y1 + margin:
            return True
    return False


def _occluder_rect(rng, box):
    """Slab over the bottom or a side of ``box``, extending past its edges."""
    x0, y0, x1, y1 = box.corners
    cover = rng.uniform(0.15, 1.0)
    pad = rng.uniform(1.0, 4.0, size=3)
    mode = rng.choice(["bottom", "left", "right"], p=[0.5, 0.25, 0.25])
    if mode == "bottom":
        return x0 - pad[0], y1 - cover * box.h, x1 + pad[1], y1 + pad[2]
    if mode == "left":
        return x0 - pad[0], y0 - pad[1], x0 + cover * box.w, y1 + pad[2]
    return x1 - cover * box.w, y0 - pad[1], x1 + pad[0], y1 + pad[2]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def scene_rng(cfg: SceneConfig, index):
    return np.random.default_rng([cfg.seed, _SPLIT_CODES.get(cfg.split, 0), REGIMES.index(cfg.regime), int(index)])


def generate(cfg: SceneConfig, index):
    """Render scene ``index``; returns ``(image (1, H, W), [Annotation])``."""
    rng = scene_rng(cfg, index)
    H, W = cfg.image_size
    ys, xs = _pixel_centres(H, W)

    base = rng.uniform(0.15, 0.35)
    tilt = rng.uniform(-0.1, 0.1, size=2)
    img = base + tilt[0] * (xs / W - 0.5) + tilt[1] * (ys / H - 0.5)
    img = np.broadcast_to(img, (H, W)).copy()

    for _ in range(rng.integers(cfg.clutter_per_image[0], cfg.clutter_per_image[1] + 1)):
        cw, ch = rng.uniform(4, 20), rng.uniform(2, 8)
        cx, cy = rng.uniform(0, W), rng.uniform(0, H)
        img[_rect_mask(H, W, cx - cw / 2, cy - ch / 2, cx + cw / 2, cy + ch / 2)] = rng.uniform(0.4, 0.7)

    n_obj = rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1)
    boxes, classes = [], []
    for _ in range(n_obj):
        cls = int(rng.choice(len(cfg.class_probs), p=cfg.class_probs))
        for _ in range(cfg.max_retries):
            box = _sample_box(rng, cfg, cls)
            if box is not None and not _overlaps(box, boxes):
                boxes.append(box)
                classes.append(cls)
                break

    masks = []
    for cls, box in zip(classes, boxes):
        m = _object_mask(H, W, cls, box)
        img[m] = rng.uniform(0.7, 1.0)
        masks.append(m)

    covered = np.zeros((H, W), dtype=bool)
    for box in boxes:
        if rng.random() < cfg.occluder_density:
            x0, y0, x1, y1 = _occluder_rect(rng, box)
            om = _rect_mask(H, W, x0, y0, x1, y1)
            level = rng.uniform(0.45, 0.6)
            stripes = 0.04 * np.sign(np.sin(ys * rng.uniform(1.0, 2.5)))
            img = np.where(om, level + stripes, img)
            covered |= om

    if cfg.regime == "night":
        img = img * 0.35
    sigma = cfg.noise_sigma * (2.0 if cfg.regime == "night" else 1.0)
    img = np.clip(img + rng.normal(0.0, sigma, size=(H, W)), 0.0, 1.0)

    anns = []
    for cls, box, m in zip(classes, boxes, masks):
        total = int(m.sum())
        frac = float((m & covered).sum()) / total if total else 0.0
        anns.append(Annotation(cls, box, frac, occlusion_level(frac), frac >= cfg.ignore_above_fraction))
    return img[None], anns


# ---------------------------------------------------------------------------
# PGM I/O
# ---------------------------------------------------------------------------


def write_image(path, image):
    """Write a ``(1, H, W)`` or ``(H, W)`` image in ``[0, 1]`` as 8-bit binary PGM."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[0]
    if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    h, w = arr.shape
    data = np.rint(arr * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _pgm_tokens(buf):
    pos, tokens = 0, []
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"truncated PGM header at byte offset {pos}")
        tokens.append((buf[start:pos], start))
    return tokens, pos + 1


def read_image(path):
    """Read a binary PGM into a ``(1, H, W)`` float array in ``[0, 1]``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, data_start = _pgm_tokens(buf)
    if tokens[0][0] != b"P5":
        raise DataError(f"{path}: bad magic {tokens[0][0]!r} at byte offset 0")
    vals = []
    for tok, off in tokens[1:]:
        try:
            vals.append(int(tok))
        except ValueError:
            raise DataError(f"{path}: non-integer header field {tok!r} at byte offset {off}") from None
    w, h, maxval = vals
    if maxval != 255 or w < 1 or h < 1:
        raise DataError(f"{path}: unsupported header (w={w}, h={h}, maxval={maxval}) at byte offset {tokens[1][1]}")
    data = buf[data_start : data_start + w * h]
    if len(data) != w * h:
        raise DataError(f"{path}: expected {w * h} pixel bytes after offset {data_start}, found {len(data)}")
    return (np.frombuffer(data, dtype=np.uint8).reshape(h, w) / 255.0)[None]


# ---------------------------------------------------------------------------
# annotation I/O
# ---------------------------------------------------------------------------

ANNOTATION_FIELDS = ("class", "cx", "cy", "w", "h", "occlusion_fraction", "occlusion_level", "ignore")


def write_annotations(path, annotations):
    lines = ["# " + " ".join(ANNOTATION_FIELDS)]
    for a in annotations:
        b = a.bbox
        lines.append(" ".join([
            str(a.class_id), repr(float(b.cx)), repr(float(b.cy)), repr(float(b.w)), repr(float(b.h)),
            repr(float(a.occlusion_fraction)), str(a.occlusion_level), str(int(a.ignore)),
        ]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_field(name, text, lineno, path):
    try:
        if name in ("class", "occlusion_level"):
            return int(text)
        if name == "ignore":
            if text not in ("0", "1"):
                raise ValueError
            return text == "1"
        return float(text)
    except ValueError:
        raise DataError(f"{path}:{lineno}: field {name!r} has invalid value {text!r}") from None


def read_annotations(path):
    anns = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != len(ANNOTATION_FIELDS):
                raise DataError(f"{path}:{lineno}: expected {len(ANNOTATION_FIELDS)} fields, got {len(parts)}")
            rec = {n: _parse_field(n, t, lineno, path) for n, t in zip(ANNOTATION_FIELDS, parts)}
            try:
                box = BBox(rec["cx"], rec["cy"], rec["w"], rec["h"])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: field 'w'/'h': {exc}") from None
            if rec["occlusion_level"] not in (0, 1, 2, 3):
                raise DataError(f"{path}:{lineno}: field 'occlusion_level' must be 0..3")
            if not 0.0 <= rec["occlusion_fraction"] <= 1.0:
                raise DataError(f"{path}:{lineno}: field 'occlusion_fraction' must be in [0, 1]")
            anns.append(Annotation(rec["class"], box, rec["occlusion_fraction"], rec["occlusion_level"], rec["ignore"]))
    return anns


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """In-memory split: images ``(N, 1, H, W)`` plus per-image annotations."""

    images: np.ndarray
    annotations: list
    ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def ground_truths(self, i):
        return [a.to_ground_truth() for a in self.annotations[i]]


def generate_split(cfg: SceneConfig, count):
    imgs, anns = [], []
    for i in range(count):
        img, a = generate(cfg, i)
        # quantise exactly as a PGM roundtrip would, so in-memory and on-disk data agree
        imgs.append(np.rint(img * 255.0) / 255.0)
        anns.append(a)
    return Dataset(np.stack(imgs), anns, [f"{i:05d}" for i in range(count)])


def _hash_files(root, files):
    h = hashlib.sha256()
    for rel in files:
        h.update(rel.encode())
        with open(os.path.join(root, rel), "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def write_dataset(root, splits):
    """Generate splits and write images, annotations and ``manifest.json``.

    ``splits`` maps a split name to ``(SceneConfig, count)``.
    """
    os.makedirs(root, exist_ok=True)
    manifest = {"format": "bayesgrid-dataset", "version": 1, "splits": {}}
    all_files = []
    for name, (cfg, count) in splits.items():
        d = os.path.join(root, name)
        os.makedirs(d, exist_ok=True)
        ids = []
        for i in range(count):
            img, anns = generate(cfg, i)
            sid = f"{i:05d}"
            write_image(os.path.join(d, sid + ".pgm"), img)
            write_annotations(os.path.join(d, sid + ".txt"), anns)
            ids.append(sid)
            all_files += [f"{name}/{sid}.pgm", f"{name}/{sid}.txt"]
        manifest["splits"][name] = {"count": count, "ids": ids, "config": cfg.to_dict()}
    manifest["content_hash"] = _hash_files(root, all_files)
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_manifest(root):
    path = os.path.join(root, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset manifest {path}: {exc}") from None
    if manifest.get("format") != "bayesgrid-dataset" or "splits" not in manifest:
        raise DataError(f"{path}: not a bayesgrid dataset manifest")
    return manifest


def load_split(root, name, verify=False):
    manifest = load_manifest(root)
    if name not in manifest["splits"]:
        raise DataError(f"split {name!r} not in manifest (have {sorted(manifest['splits'])})")
    if verify:
        files = [f"{s}/{i}{ext}" for s, info in manifest["splits"].items() for i in info["ids"] for ext in (".pgm", ".txt")]
        if _hash_files(root, files) != manifest["content_hash"]:
            raise DataError(f"{root}: content hash mismatch")
    ids = manifest["splits"][name]["ids"]
    d = os.path.join(root, name)
    images = np.stack([read_image(os.path.join(d, i + ".pgm")) for i in ids]) if ids else np.zeros((0, 1, 1, 1))
    anns = [read_annotations(os.path.join(d, i + ".txt")) for i in ids]
    return Dataset(images, anns, list(ids))
