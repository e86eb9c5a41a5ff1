"""Leave-one-out retraining oracle: brute-force ground truth for influence."""

from __future__ import annotations

import numpy as np

from ..data import Dataset, LabeledExample
from ..errors import FeasibilityError
from ..models import ArchSpec, TrainConfig, network_for, train

LOO_SIZE_GATE = 500


def _test_loss(ckpt, test_ex: LabeledExample) -> float:
    net = network_for(ckpt.arch)
    return float(net.losses(ckpt.params, test_ex.image[None],
                            np.array([test_ex.label]))[0])


def loo_oracle(arch: ArchSpec, train_set: Dataset, drop_id: int,
               test_ex: LabeledExample, cfg: TrainConfig) -> float:
    """Change in test loss when one training point is removed.

    Positive means the dropped point was helping the test prediction. Both
    trainings share the seed so the comparison isolates the dropped point.
    """
    if len(train_set) > LOO_SIZE_GATE:
        raise FeasibilityError(f"leave-one-out gate: N={len(train_set)} > {LOO_SIZE_GATE}")
    full = train(arch, train_set, cfg)
    without = train(arch, train_set.drop_ids([drop_id]), cfg)
    return _test_loss(without, test_ex) - _test_loss(full, test_ex)


def loo_sweep(arch: ArchSpec, train_set: Dataset, test_ex: LabeledExample,
              cfg: TrainConfig, drop_ids=None) -> dict[int, float]:
    """Leave-one-out deltas for many drops against one shared full-train run."""
    if len(train_set) > LOO_SIZE_GATE:
        raise FeasibilityError(f"leave-one-out gate: N={len(train_set)} > {LOO_SIZE_GATE}")
    if drop_ids is None:
        drop_ids = [int(i) for i in train_set.ids]
    base = _test_loss(train(arch, train_set, cfg), test_ex)
    out = {}
    for drop in drop_ids:
        ckpt = train(arch, train_set.drop_ids([drop]), cfg)
        out[int(drop)] = _test_loss(ckpt, test_ex) - base
    return out
