"""Multi-seed accuracy comparison of activation granularities, with and without distillation."""
from __future__ import annotations

import time

import numpy as np

from .activation import GRANULARITIES
from .model import build_squeezenet_opt
from .training import TrainConfig, evaluate, train_student, train_teacher

ORDER_SLACK = 0.005


def _default_builder(act, ds, seed):
    return build_squeezenet_opt(ds.num_classes, ds.image_shape, act, seed=seed)


def accuracy_trends(dataset, seeds=(0, 1, 2, 3, 4), config: TrainConfig | None = None,
                    builder=None, granularities=GRANULARITIES, dtype=np.float64,
                    log=None) -> dict:
    """Test accuracy of every granularity, trained plainly and with a distilled teacher.

    For each seed a ReLU teacher is trained once, then each polynomial
    student is trained twice from the same initialization: on hard labels
    only, and with distillation from that teacher.  ``builder(activation,
    dataset, seed)`` makes the networks (default: the optimized SqueezeNet).
    ``dtype=np.float32`` roughly halves training time on large inputs.
    """
    config = config or TrainConfig()
    builder = builder or _default_builder
    if dtype != np.float64:
        dataset = dataset.subset()
        dataset.x_train = dataset.x_train.astype(dtype)
        dataset.x_val = dataset.x_val.astype(dtype)
        dataset.x_test = dataset.x_test.astype(dtype)
        base = builder
        builder = lambda act, ds, seed: base(act, ds, seed).astype(dtype)
    runs = []
    t0 = time.perf_counter()
    for seed in seeds:
        cfg = TrainConfig.from_dict({**config.to_dict(), "seed": int(seed)})
        teacher, _ = train_teacher(builder("relu", dataset, seed), dataset, cfg)
        t_acc = evaluate(teacher, dataset.x_test, dataset.y_test)
        runs.append({"seed": int(seed), "model": "teacher", "kd": False, "test_acc": t_acc})
        if log:
            log(runs[-1])
        for gran in granularities:
            for kd in (False, True):
                net, _ = train_student(builder(gran, dataset, seed), dataset, cfg,
                                       teacher if kd else None)
                runs.append({"seed": int(seed), "model": gran, "kd": kd,
                             "test_acc": evaluate(net, dataset.x_test, dataset.y_test)})
                if log:
                    log(runs[-1])
    return summarize(runs, time.perf_counter() - t0)


def summarize(runs, seconds=float("nan")) -> dict:
    def mean(model, kd):
        v = [r["test_acc"] for r in runs if r["model"] == model and r["kd"] == kd]
        return float(np.mean(v)) if v else float("nan")

    grans = [g for g in GRANULARITIES if any(r["model"] == g for r in runs)]
    plain = {g: mean(g, False) for g in grans}
    distilled = {g: mean(g, True) for g in grans}
    ordering = None
    if set(grans) == set(GRANULARITIES):
        e, c, l = plain["element"], plain["channel"], plain["layer"]
        ordering = bool(e >= c - ORDER_SLACK and c >= l - ORDER_SLACK)
    return {
        "runs": runs,
        "teacher": mean("teacher", False),
        "mean_acc": plain,
        "mean_acc_kd": distilled,
        "kd_delta": {g: distilled[g] - plain[g] for g in grans},
        "ordering_holds": ordering,
        "ordering_slack": ORDER_SLACK,
        "seconds": seconds,
    }
