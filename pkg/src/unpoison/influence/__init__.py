"""Influence-score backends over a trained checkpoint.

A score is the alignment form s = grad_test^T (H_hat + lambda I)^{-1}
grad_train, where H_hat is the backend's curvature model: the exact dense
Hessian for tiny models, eigenvalue-corrected Kronecker factors for the
conv tier, or a random-projection gradient kernel. High positive scores mean
the training point pushes the test prediction the way it currently goes;
poisons score high against the test points they control.

The test example's label field is used as the differentiation label; callers
normally attach the model's predicted label first (see
``models.with_predicted_label``) and transformed copies carry their flipped
labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import Dataset, LabeledExample
from ..errors import ConfigurationError
from ..models import Checkpoint, loss_and_grad, network_for
from .ekfac import EkfacCurvature, fit_ekfac
from .exact import EXACT_PARAM_GATE, ExactCurvature, fit_exact, mean_loss_hessian
from .loo import LOO_SIZE_GATE, loo_oracle, loo_sweep
from .projkernel import ProjKernelCurvature, check_same_train, fit_projkernel

BACKENDS = ("exact", "ekfac", "projkernel")


@dataclass(frozen=True)
class InfluenceConfig:
    backend: str = "ekfac"
    damping: float | None = None  # None -> 1e-3 x mean curvature diagonal
    layers_in_scope: tuple | None = None  # ekfac only; None = all layers
    projection_dim: int = 512
    seed: int = 0
    batch_size: int = 256

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigurationError(f"unknown influence backend '{self.backend}'")
        if self.damping is not None and self.damping <= 0:
            raise ConfigurationError("damping must be positive")
        if self.projection_dim < 1:
            raise ConfigurationError("projection_dim must be positive")

    def to_dict(self) -> dict:
        return {"backend": self.backend, "damping": self.damping,
                "layers_in_scope": list(self.layers_in_scope)
                if self.layers_in_scope else None,
                "projection_dim": self.projection_dim, "seed": self.seed}


def fit_curvature(ckpt: Checkpoint, train: Dataset, cfg: InfluenceConfig):
    if cfg.backend == "exact":
        return fit_exact(ckpt, train, cfg.damping)
    if cfg.backend == "ekfac":
        return fit_ekfac(ckpt, train, cfg.damping, cfg.layers_in_scope,
                         cfg.batch_size)
    return fit_projkernel(ckpt, train, cfg.damping, cfg.projection_dim,
                          cfg.seed, cfg.batch_size)


def _ihvp(curvature, ckpt: Checkpoint, grad: np.ndarray) -> np.ndarray:
    if isinstance(curvature, ExactCurvature):
        return curvature.ihvp(grad)
    if isinstance(curvature, EkfacCurvature):
        return curvature.ihvp(network_for(ckpt.arch), grad)
    raise ConfigurationError("ihvp is undefined for the projkernel backend")


def _test_grads(ckpt: Checkpoint, examples) -> np.ndarray:
    return np.stack([loss_and_grad(ckpt, ex)[1] for ex in examples])


def train_grad_dots(ckpt: Checkpoint, train: Dataset, vectors: np.ndarray,
                    batch_size: int = 256) -> np.ndarray:
    """(N, m) per-training-example gradient dots, fixed accumulation order."""
    net = network_for(ckpt.arch)
    n = len(train)
    out = np.zeros((n, np.atleast_2d(vectors).shape[0]))
    for lo in range(0, n, batch_size):
        positions = np.arange(lo, min(lo + batch_size, n))
        images, labels = train.batch(positions)
        out[positions] = net.grad_dots(ckpt.params, images, labels, vectors)
    return out


def influence_vectors(curvature, ckpt: Checkpoint, test_examples,
                      train: Dataset, batch_size: int = 256) -> np.ndarray:
    """(N, m) influence of every training point on each of m test examples.

    All test columns share one pass over the training set.
    """
    grads = _test_grads(ckpt, test_examples)
    if isinstance(curvature, ProjKernelCurvature):
        check_same_train(curvature, train)
        phi = curvature.project(grads)
        return curvature.features @ curvature.solve(phi.T)
    vs = np.stack([_ihvp(curvature, ckpt, g) for g in grads])
    return train_grad_dots(ckpt, train, vs, batch_size)


def influence_vector(curvature, ckpt: Checkpoint, test_ex: LabeledExample,
                     train: Dataset, batch_size: int = 256) -> np.ndarray:
    return influence_vectors(curvature, ckpt, [test_ex], train, batch_size)[:, 0]


def influence_score(curvature, ckpt: Checkpoint, train_ex: LabeledExample,
                    test_ex: LabeledExample) -> float:
    _, g_train = loss_and_grad(ckpt, train_ex)
    _, g_test = loss_and_grad(ckpt, test_ex)
    if isinstance(curvature, ProjKernelCurvature):
        phi_test = curvature.project(g_test[None])[0]
        phi_train = curvature.project(g_train[None])[0]
        return float(phi_train @ curvature.solve(phi_test))
    return float(g_train @ _ihvp(curvature, ckpt, g_test))


__all__ = [
    "BACKENDS", "EXACT_PARAM_GATE", "LOO_SIZE_GATE", "EkfacCurvature",
    "ExactCurvature", "InfluenceConfig", "ProjKernelCurvature",
    "fit_curvature", "influence_score", "influence_vector",
    "influence_vectors", "loo_oracle", "loo_sweep", "mean_loss_hessian",
    "train_grad_dots",
]
