"""Multi-task vs. stage-wise ablation on synthetic data.

Each seed produces four mAP cells, in this column order:

1. ``cls-only``: trained with lambda = 0, no box regression at test time.
2. ``multitask-no-bbox``: multi-task model with test-time regression disabled.
3. ``stage-wise``: the cls-only model plus a regressor trained on top of it
   with everything else frozen.
4. ``multitask``: multi-task model with test-time regression.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
import logging
import math
import os

import numpy as np

from .synthetic import FeatureStore, SyntheticConfig, generate_scenes, scene_image
from .train import evaluate, train, train_bbox_stage

log = logging.getLogger(__name__)

COLUMNS = ("cls-only", "multitask-no-bbox", "stage-wise", "multitask")


def worker_count():
    """Worker cap from ``FRCNN_THREADS`` (0 or unset means one per CPU)."""
    raw = os.environ.get("FRCNN_THREADS", "0").strip() or "0"
    n = int(raw)
    if n < 0:
        raise ValueError("FRCNN_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


@dataclass
class AblationReport:
    seeds: list
    cells: dict  # seed -> list of 4 mAPs (nan marks a failed cell)
    failures: dict = field(default_factory=dict)  # seed -> message

    def means(self):
        out = []
        for j in range(len(COLUMNS)):
            vals = [self.cells[s][j] for s in self.seeds if not math.isnan(self.cells[s][j])]
            out.append(float(np.mean(vals)) if vals else float("nan"))
        return out

    def to_tsv(self):
        lines = ["seed\t" + "\t".join(COLUMNS)]
        for s in self.seeds:
            vals = ["FAILED" if math.isnan(v) else f"{100 * v:.2f}" for v in self.cells[s]]
            lines.append(f"{s}\t" + "\t".join(vals))
        lines.append("mean\t" + "\t".join(f"{100 * v:.2f}" for v in self.means()))
        return "\n".join(lines) + "\n"


def _seed_data(run, synth, seed):
    train_sc = generate_scenes(run.n_train, synth, [seed, 0], "train")
    test_sc = generate_scenes(run.n_test, synth, [seed, 1], "test")
    train_im = [scene_image(s, synth) for s in train_sc]
    test_im = [scene_image(s, synth) for s in test_sc]
    store = FeatureStore(train_im + test_im, train_sc + test_sc, synth)
    return train_im, test_im, store


def run_seed(run, synth, seed):
    """All four cells for one seed; returns a list of mAPs."""
    run = replace(run, seed=seed)
    train_im, test_im, store = _seed_data(run, synth, seed)
    cls_only = train(replace(run, mode="cls-only"), train_im, store)
    multitask = train(replace(run, mode="multitask"), train_im, store)
    staged = train_bbox_stage(cls_only, train_im, store)
    return [
        evaluate(cls_only.net, cls_only.normalizer, test_im, store, run, use_bbox_reg=False).mean_ap,
        evaluate(multitask.net, multitask.normalizer, test_im, store, run, use_bbox_reg=False).mean_ap,
        evaluate(staged.net, staged.normalizer, test_im, store, run, use_bbox_reg=True).mean_ap,
        evaluate(multitask.net, multitask.normalizer, test_im, store, run, use_bbox_reg=True).mean_ap,
    ]


def _run_seed_safe(args):
    run, synth, seed = args
    try:
        return seed, run_seed(run, synth, seed), None
    except Exception as exc:  # partial report on any cell failure
        return seed, [float("nan")] * len(COLUMNS), f"{type(exc).__name__}: {exc}"


def run_ablation(run, seeds, synth=None, workers=None):
    """Run every seed (in parallel when more than one worker is allowed)."""
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError("the ablation needs at least 3 seeds")
    synth = synth or SyntheticConfig(num_classes=run.num_classes)
    workers = min(workers or worker_count(), len(seeds))
    jobs = [(run, synth, s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed_safe, jobs))
    else:
        results = [_run_seed_safe(j) for j in jobs]
    report = AblationReport(seeds, {})
    for seed, cells, err in results:
        report.cells[seed] = cells
        if err:
            report.failures[seed] = err
            log.error("seed %s failed: %s", seed, err)
    return report
