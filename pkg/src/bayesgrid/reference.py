"""The desk-scale reference experiment.

Fixes the data sizes, the training schedule and the analysis settings that
the acceptance suite and the demos share, and caches the trained result on
disk so later analyses reuse it.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass

from bayesgrid.bayes import McConfig
from bayesgrid.pipeline import TrainConfig, load_network, select_checkpoint, train
from bayesgrid.synthdata import SceneConfig, generate_split

TRAIN_SCENES = 2000
VAL_SCENES = 500
DATA_SEED = 0
ANALYSIS_MC = McConfig(T=20, base_seed=4242)

# objectness weight 50: the all-slot objectness mean otherwise drowns the few positive slots
REFERENCE_TRAIN = dict(
    variant="aleatoric+epistemic", lr=1e-3, weight_decay=5e-4, batch_size=8,
    phase1_iters=4000, total_iters=9000, eval_every=1000, seed=0, val_T=8,
    obj_weight=50.0,
)


def reference_data(seed=DATA_SEED, n_train=TRAIN_SCENES, n_val=VAL_SCENES):
    """In-memory train and clean (day) validation splits."""
    return (generate_split(SceneConfig(seed=seed, split="train"), n_train),
            generate_split(SceneConfig(seed=seed, split="val"), n_val))


def reference_config(out_dir="", **overrides):
    return TrainConfig(**{**REFERENCE_TRAIN, "out_dir": str(out_dir), **overrides})


@dataclass
class ReferenceRun:
    out_dir: str
    best_iteration: int
    best_path: str
    best_val_lamr: float
    cpu_seconds: float
    wall_seconds: float

    def network(self):
        return load_network(self.best_path)


def _summary_path(out_dir):
    return os.path.join(out_dir, "reference.json")


def run_reference(out_dir, data=None, reuse=True):
    """Train the reference model into ``out_dir`` (or reuse a finished run there)."""
    path = _summary_path(out_dir)
    cfg = reference_config(out_dir)
    if reuse and os.path.exists(path):
        with open(path) as fh:
            saved = json.load(fh)
        if saved.get("config") == {**cfg.to_dict(), "out_dir": ""}:
            return ReferenceRun(**saved["run"])
    train_set, val_set = data if data is not None else reference_data()
    c0, w0 = time.process_time(), time.perf_counter()
    result = train(cfg, train_set, val_set)
    cpu, wall = time.process_time() - c0, time.perf_counter() - w0
    best = select_checkpoint(result.checkpoints)
    run = ReferenceRun(str(out_dir), best.iteration, best.path, best.val_lamr, cpu, wall)
    with open(path, "w") as fh:
        json.dump({"config": {**cfg.to_dict(), "out_dir": ""}, "run": asdict(run)}, fh, indent=1)
    return run
