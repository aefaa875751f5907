"""Training, checkpoint selection, inference, timing and heatmap rendering."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from bayesgrid import autodiff as ad
from bayesgrid import checkpoint as ckpt
from bayesgrid import network as nw
from bayesgrid.bayes import McConfig, summarize_batch, REG_DIMS
from bayesgrid.errors import NonFiniteError, DataError
from bayesgrid.evalkit import EvalSettings, evaluate_detections
from bayesgrid.geometry import kmeans_priors, PRIORS_PER_SCALE
from bayesgrid.loss import build_targets, total_loss, ScaleTargets
from bayesgrid.postprocess import decode_all, postprocess, EVAL_SCORE_THRESHOLD

log = logging.getLogger(__name__)

VARIANTS = {
    "baseline": (False, False),
    "aleatoric": (True, False),
    "epistemic": (False, True),
    "aleatoric+epistemic": (True, True),
}


@dataclass
class TrainConfig:
    variant: str = "aleatoric+epistemic"
    lr: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 8
    phase1_iters: int = 2000
    total_iters: int = 4000
    eval_every: int = 500
    seed: int = 0
    data_root: str = ""
    train_split: str = "train"
    val_split: str = "val"
    val_limit: int = 0  # 0: the whole validation split
    val_T: int = 8
    val_base_seed: int = 1000
    fit_priors: bool = True
    kmeans_seed: int = 0
    loc_weight: float = 1.0
    obj_weight: float = 1.0
    cls_weight: float = 1.0
    balance_objectness: bool = False
    dropout_rate: float = 0.1
    out_dir: str = ""
    detector: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {sorted(VARIANTS)}")
        if not 0 <= self.phase1_iters < self.total_iters:
            raise ValueError("need 0 <= phase1_iters < total_iters")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update; returns new :class:`~bayesgrid.autodiff.Parameter` objects.

    ``params`` maps name to parameter. Each parameter keeps its own step
    count so parameters added mid-training get proper bias correction.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    new = dict(params)
    for name, g in grads.items():
        p = params[name]
        t = state.t.get(name, 0) + 1
        m = beta1 * state.m.get(name, np.zeros_like(g)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(g)) + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        new[name] = ad.Parameter(name, p.data - lr * mhat / (np.sqrt(vhat) + eps), p.trainable, p.decay)
        state.m[name], state.v[name], state.t[name] = m, v, t
    return new


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_metadata(net, state: AdamState, iteration, config: TrainConfig, rng_state):
    return {
        "iteration": int(iteration),
        # the output location is not part of the experiment, so runs in different dirs stay byte-identical
        "train_config": {**config.to_dict(), "out_dir": ""} if config is not None else None,
        "detector_config": net.config.to_dict(),
        "adam_t": {k: int(v) for k, v in sorted(state.t.items())},
        "rng_state": rng_state,
    }


def write_checkpoint(path, net, state: AdamState, metadata):
    """Serialise parameters, batch-norm statistics and Adam moments with ``metadata``."""
    records = {name: p.data for name, p in net.params.items()}
    for name, st in net.bn_stats.items():
        records[f"bn/{name}.mean"] = st.mean
        records[f"bn/{name}.var"] = st.var
    for name in sorted(state.m):
        records[f"adam.m/{name}"] = state.m[name]
        records[f"adam.v/{name}"] = state.v[name]
    ckpt.save(path, records, metadata)


def save_checkpoint(path, net, state: AdamState, iteration, config: TrainConfig, rng_state):
    write_checkpoint(path, net, state, checkpoint_metadata(net, state, iteration, config, rng_state))


def load_checkpoint(path):
    """Return ``(net, adam_state, metadata)``."""
    records, meta = ckpt.load(path)
    cfg = nw.DetectorConfig.from_dict(meta["detector_config"])
    net = nw.build(cfg, seed=0)
    for name, p in list(net.params.items()):
        if name not in records:
            raise DataError(f"checkpoint {path} lacks parameter {name!r}")
        net.params[name] = ad.Parameter(name, records[name], p.trainable, p.decay)
    for name, st in net.bn_stats.items():
        st.mean = records[f"bn/{name}.mean"]
        st.var = records[f"bn/{name}.var"]
    state = AdamState()
    for key, arr in records.items():
        if key.startswith("adam.m/"):
            state.m[key[7:]] = arr
        elif key.startswith("adam.v/"):
            state.v[key[7:]] = arr
    state.t = {k: int(v) for k, v in meta.get("adam_t", {}).items()}
    return net, state, meta


def load_network(path):
    return load_checkpoint(path)[0]


# ---------------------------------------------------------------------------
# data helpers
# ---------------------------------------------------------------------------


def fit_prior_sizes(dataset, strides, seed=0):
    boxes = [(a.bbox.w, a.bbox.h) for anns in dataset.annotations for a in anns]
    return kmeans_priors(boxes, PRIORS_PER_SCALE * len(strides), seed=seed)


def _stack_targets(per_image, idx):
    return [
        ScaleTargets(
            loc=np.concatenate([per_image[i][s].loc for i in idx]),
            cls=np.concatenate([per_image[i][s].cls for i in idx]),
            obj=np.concatenate([per_image[i][s].obj for i in idx]),
        )
        for s in range(len(per_image[0]))
    ]


def batch_indices(seed, iteration, batch_size, n):
    """Indices for ``iteration``; a pure function of its arguments."""
    per_epoch = max(n // batch_size, 1)
    epoch, pos = divmod(iteration, per_epoch)
    perm = np.random.default_rng([seed, 7, epoch]).permutation(n)
    return perm[pos * batch_size : (pos + 1) * batch_size], {"epoch": int(epoch), "position": int(pos)}


def _phase_config(base: nw.DetectorConfig, variant, phase, dropout_rate):
    if phase == 1:
        return replace(base, aleatoric=False, dropout_rate=0.0)
    aleatoric, dropout = VARIANTS[variant]
    return replace(base, aleatoric=aleatoric, dropout_rate=dropout_rate if dropout else 0.0)


def val_mc(config: TrainConfig, net):
    if net.config.dropout_rate > 0 and net.config.dropout_layers_per_head > 0:
        return McConfig(T=config.val_T, base_seed=config.val_base_seed)
    return McConfig(T=1, deterministic=True)


# ---------------------------------------------------------------------------
# inference / evaluation
# ---------------------------------------------------------------------------


@dataclass
class InferenceResult:
    summaries: list
    detections: dict
    gts: dict


def run_inference(net, dataset, mc: McConfig, score_threshold=EVAL_SCORE_THRESHOLD, limit=0, nms=True):
    n = len(dataset) if not limit else min(limit, len(dataset))
    summaries = summarize_batch(net, dataset.images[:n], mc)
    geom, priors = net.geometry, net.priors
    dets, gts = {}, {}
    for i in range(n):
        key = dataset.ids[i] if dataset.ids else str(i)
        gts[key] = dataset.ground_truths(i)
        if nms:
            dets[key] = postprocess(summaries[i], geom, priors, key, score_threshold)
        else:
            dets[key] = decode_all(summaries[i], geom, priors, score_threshold, key)
    return InferenceResult(summaries, dets, gts)


def evaluate_net(net, dataset, mc: McConfig, settings: EvalSettings = None, limit=0):
    res = run_inference(net, dataset, mc, limit=limit)
    matches, curve, value = evaluate_detections(res.detections, res.gts, settings)
    return value, curve, res


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class CheckpointRecord:
    iteration: int
    path: str
    val_lamr: float


@dataclass
class TrainResult:
    net: nw.Network
    checkpoints: list
    log: list


def _write_log(path, entries):
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def train(config: TrainConfig, train_set=None, val_set=None, resume_from=None, stop_at=None):
    """Two-phase training.

    Phase 1 trains the plain detector (no dropout, fixed unit variance).
    At ``phase1_iters`` the weights branch into the configured variant and
    training continues to ``total_iters``. Datasets default to the splits
    under ``config.data_root``. ``stop_at`` halts early (for resume tests).
    """
    from bayesgrid.synthdata import load_split

    if train_set is None:
        train_set = load_split(config.data_root, config.train_split)
    if val_set is None and config.eval_every and config.data_root:
        val_set = load_split(config.data_root, config.val_split)
    if len(train_set) == 0:
        raise DataError("empty training split")

    base = nw.DetectorConfig.from_dict({**nw.DetectorConfig().to_dict(), **config.detector})
    if config.fit_priors and "prior_sizes" not in config.detector:
        sizes = fit_prior_sizes(train_set, base.strides, config.kmeans_seed)
        base = replace(base, prior_sizes=tuple(map(tuple, sizes)))

    if resume_from is not None:
        net, state, meta = load_checkpoint(resume_from)
        start = meta["iteration"]
        entries = list(meta.get("rng_state", {}).get("log", []))
    else:
        net = nw.build(_phase_config(base, config.variant, 1, config.dropout_rate), seed=config.seed)
        state, start, entries = AdamState(), 0, []

    geom, priors = net.geometry, net.priors
    per_image, dropped = [], 0
    for i in range(len(train_set)):
        t, d = build_targets([train_set.ground_truths(i)], geom, priors, base.num_classes)
        per_image.append(t)
        dropped += d
    if dropped:
        log.info("%d ground truths dropped by slot collisions", dropped)

    out_dir = config.out_dir
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    records = []
    end = config.total_iters if stop_at is None else min(stop_at, config.total_iters)

    it = start
    try:
        while it < end:
            phase2 = _phase_config(base, config.variant, 2, config.dropout_rate)
            if it >= config.phase1_iters and net.config != phase2:
                net = nw.branch(net, phase2)
            idx, rng_info = batch_indices(config.seed, it, config.batch_size, len(train_set))
            images = train_set.images[idx]
            targets = _stack_targets(per_image, idx)
            seeds = [ad.mix_seed(config.seed, it, b) for b in range(len(idx))]
            dropout_on = net.config.dropout_rate > 0
            outs = nw.apply(net, images, seeds if dropout_on else None, bn_mode="train")
            lb = total_loss(
                outs, targets, net.parameters(), config.weight_decay,
                "aleatoric" if net.config.aleatoric else "baseline", base.num_classes,
                config.loc_weight, config.obj_weight, config.cls_weight, config.balance_objectness,
            )
            grads = ad.backward(lb.tensor, net.parameters())
            net.params = adam_step(net.params, grads, state, config.lr)
            it += 1
            entry = {"iteration": it, "loss": lb.total, "loc": lb.loc, "obj": lb.obj, "cls": lb.cls,
                     "weight_decay": lb.weight_decay, "positives": lb.positives}
            if config.eval_every and (it % config.eval_every == 0 or it == config.total_iters) and val_set is not None:
                value, curve, _ = evaluate_net(net, val_set, val_mc(config, net), limit=config.val_limit)
                entry["val_lamr"] = value
                path = os.path.join(out_dir, f"ckpt_{it:06d}.bdet") if out_dir else ""
                if path:
                    save_checkpoint(path, net, state, it, config, {**rng_info, "log": entries + [entry]})
                records.append(CheckpointRecord(it, path, value))
                log.info("iter %d loss %.4f val LAMR %.4f", it, lb.total, value)
            entries.append(entry)
    except NonFiniteError as exc:
        if out_dir:
            _write_log(os.path.join(out_dir, "metrics.jsonl"), entries)
        raise NonFiniteError(f"training diverged at iteration {it}: {exc}") from exc

    if out_dir:
        _write_log(os.path.join(out_dir, "metrics.jsonl"), entries)
        save_checkpoint(os.path.join(out_dir, f"state_{it:06d}.bdet"), net, state, it, config,
                        {**batch_indices(config.seed, it, config.batch_size, len(train_set))[1], "log": entries})
    return TrainResult(net, records, entries)


def select_checkpoint(series):
    """Lowest validation LAMR; ties go to the earlier iteration."""
    if not series:
        raise ValueError("no evaluated checkpoints")
    return min(series, key=lambda c: (c.val_lamr, c.iteration))


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------


@dataclass
class TimingRow:
    label: str
    T: int
    latency_ms: float
    lamr: float


def timing_sweep(net, dataset, T_values=(1, 5, 10, 20, 50), repeats=20, warmup=2, lamr_limit=0,
                 base_seed=0, settings: EvalSettings = None):
    """Median per-image latency of MC inference for each ``T``, plus LAMR.

    The first row is the deterministic single pass (no dropout sampling).
    """
    rows = []
    configs = [("no dropout", McConfig(T=1, deterministic=True))] + [
        (str(T), McConfig(T=T, base_seed=base_seed)) for T in T_values
    ]
    geom, priors = net.geometry, net.priors
    n = len(dataset)
    for label, mc in configs:
        for w in range(warmup):
            summarize_batch(net, dataset.images[w % n : w % n + 1], mc)
        times = []
        for r in range(repeats):
            img = dataset.images[r % n : r % n + 1]
            t0 = time.perf_counter()
            summ = summarize_batch(net, img, mc)
            postprocess(summ[0], geom, priors)
            times.append(time.perf_counter() - t0)
        value = float("nan")
        if lamr_limit >= 0:
            value, _, _ = evaluate_net(net, dataset, mc, settings, limit=lamr_limit)
        rows.append(TimingRow(label, mc.T if not mc.deterministic else 1, 1e3 * float(np.median(times)), value))
    return rows


def timing_table(rows):
    lines = [f"{'T':>10} | {'LAMR':>8} | {'time (ms)':>9}", "-" * 33]
    for r in rows:
        lamr_s = f"{100 * r.lamr:8.2f}" if np.isfinite(r.lamr) else f"{'-':>8}"
        lines.append(f"{r.label:>10} | {lamr_s} | {r.latency_ms:9.2f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

HEATMAP_MEASURES = tuple(f"alea_{d}" for d in REG_DIMS) + tuple(f"epi_{d}" for d in REG_DIMS) + (
    "class_mi", "objectness_mi",
)


def measure_grid(summary, measure, prior_index):
    if measure not in HEATMAP_MEASURES:
        raise ValueError(f"unknown measure {measure!r}; choose from {HEATMAP_MEASURES}")
    if measure == "class_mi":
        return summary.cls_mi[..., prior_index]
    if measure == "objectness_mi":
        return summary.obj_mi[..., prior_index]
    kind, dim = measure.split("_")
    arr = summary.aleatoric_var if kind == "alea" else summary.epistemic_var
    return arr[..., prior_index, REG_DIMS.index(dim)]


def render_heatmaps(summaries, image, measure, prior_id, geom, priors, alpha=0.6):
    """Overlay one prior's per-cell uncertainty on the image as RGB in ``[0, 1]``.

    Cell values are normalised to ``[0, 1]`` within the image and blown up to
    ``stride x stride`` blocks.
    """
    prior = next((p for p in priors if p.global_id == prior_id), None)
    if prior is None:
        raise ValueError(f"no prior with id {prior_id}")
    grid = measure_grid(summaries[prior.scale_index], measure, prior.index_in_scale)
    stride = geom.scales[prior.scale_index].stride
    lo, hi = float(grid.min()), float(grid.max())
    norm = (grid - lo) / (hi - lo) if hi > lo else np.zeros_like(grid)
    heat = np.repeat(np.repeat(norm, stride, axis=0), stride, axis=1)
    gray = np.asarray(image, dtype=np.float64)
    gray = gray[0] if gray.ndim == 3 else gray
    color = np.stack([np.clip(2.0 * heat, 0, 1), np.clip(2.0 * heat - 1.0, 0, 1), np.zeros_like(heat)], axis=-1)
    return (1.0 - alpha) * gray[..., None] + alpha * color


def write_ppm(path, rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.rint(np.clip(rgb, 0, 1) * 255).astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# end-to-end gradient check
# ---------------------------------------------------------------------------

GRADCHECK_CONFIG = dict(
    input_size=(32, 32), strides=(8, 4),
    backbone=((2, 1), (3, 2), (4, 2), (4, 2)),
    head_channels=4, route_channels=2, head_depth=2, dropout_layers_per_head=2,
    dropout_rate=0.1, aleatoric=True,
    prior_sizes=((4, 9), (6, 12), (7, 16), (9, 20), (11, 24), (13, 28)),
)


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst_parameter: str
    checked: int
    seconds: float


def detector_gradcheck(seed=0, h=1e-4, batch=2, lam=5e-4):
    """Compare backprop against central differences for every weight of a small detector.

    Runs the full training loss (batch-norm in train mode, fixed dropout
    masks, aleatoric localisation) on 32x32 synthetic scenes. Leaky-ReLU and
    max-pool kinks within ``h`` of a pre-activation make the difference
    quotient itself wrong, so a few seeds show large errors that shrink with
    ``h``.
    """
    from bayesgrid.synthdata import SceneConfig, generate

    t0 = time.perf_counter()
    cfg = nw.DetectorConfig(**GRADCHECK_CONFIG)
    net = nw.build(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    for name, p in net.params.items():
        # move gammas, betas and zero-initialised heads off their special values
        if not name.endswith(".kernel"):
            p.data[...] = p.data + 0.1 * rng.standard_normal(p.shape)
        elif name.endswith(".logvar.kernel"):
            p.data[...] = 0.1 * rng.standard_normal(p.shape)
    scene = SceneConfig(seed=seed, image_size=(32, 32), pedestrian_height=(8.0, 20.0), rider_height=(8.0, 20.0))
    samples = [generate(scene, i) for i in range(batch)]
    images = np.stack([s[0] for s in samples])
    gts = [[a.to_ground_truth() for a in s[1]] for s in samples]
    targets, _ = build_targets(gts, net.geometry, net.priors, cfg.num_classes)
    seeds = [ad.mix_seed(seed, b) for b in range(batch)]

    def loss_tensor():
        outs = nw.apply(net, images, seeds, bn_mode="train")
        return total_loss(outs, targets, net.parameters(), lam, "aleatoric", cfg.num_classes).tensor

    analytic = ad.backward(loss_tensor(), net.parameters())
    worst, worst_name, checked = 0.0, "", 0
    for name, p in net.params.items():
        numeric = ad.numeric_gradient(lambda: loss_tensor().data, p.data, h)
        err = ad.relative_error(analytic[name], numeric)
        checked += p.size
        if err >= worst:
            worst, worst_name = err, name
    return GradcheckReport(worst, worst_name, checked, time.perf_counter() - t0)
