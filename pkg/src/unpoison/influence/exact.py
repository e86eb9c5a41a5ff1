"""Exact damped-Hessian curvature for tiny models.

The Hessian of the mean training loss is assembled column-by-column with
complex-step differentiation of the gradient (machine-precision, no
subtractive cancellation), then eigendecomposed so damped solves are exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import Dataset
from ..errors import FeasibilityError
from ..models import Checkpoint, network_for

EXACT_PARAM_GATE = 5000
_CSTEP = 1e-100


@dataclass(frozen=True)
class ExactCurvature:
    eigvecs: np.ndarray  # (P, P)
    eigvals: np.ndarray  # (P,)
    damping: float

    def ihvp(self, grad: np.ndarray) -> np.ndarray:
        projected = self.eigvecs.T @ grad
        return self.eigvecs @ (projected / (self.eigvals + self.damping))


def mean_loss_hessian(ckpt: Checkpoint, train: Dataset,
                      batch_size: int = 1024) -> np.ndarray:
    """Dense Hessian of the mean training loss at the checkpoint."""
    net = network_for(ckpt.arch)
    p = net.param_count
    if p > EXACT_PARAM_GATE:
        raise FeasibilityError(f"dense Hessian gate: {p} > {EXACT_PARAM_GATE} params")
    n = len(train)
    params = ckpt.params.astype(complex)
    hessian = np.empty((p, p))
    for col in range(p):
        shifted = params.copy()
        shifted[col] += 1j * _CSTEP
        acc = np.zeros(p, dtype=complex)
        for lo in range(0, n, batch_size):
            positions = np.arange(lo, min(lo + batch_size, n))
            images, labels = train.batch(positions)
            _, grad_sum = net.loss_and_grad_sum(shifted, images, labels)
            acc += grad_sum
        hessian[:, col] = acc.imag / (_CSTEP * n)
    return (hessian + hessian.T) / 2.0


def fit_exact(ckpt: Checkpoint, train: Dataset, damping: float | None) -> ExactCurvature:
    """Eigendecompose the damped Hessian.

    The default damping is 1e-3 times the mean curvature diagonal, floored so
    that H + lambda I stays positive definite with margin: a nonconvex net's
    negative tail otherwise turns the damped inverse into a sign-indefinite
    amplifier of near-null directions.
    """
    hessian = mean_loss_hessian(ckpt, train)
    eigvals, eigvecs = np.linalg.eigh(hessian)
    if damping is None:
        mean_diag = float(np.trace(hessian)) / len(hessian)
        damping = max(1e-3 * abs(mean_diag), 1.5 * max(0.0, -float(eigvals[0])))
        if damping <= 0.0:
            damping = 1e-8
    return ExactCurvature(eigvecs, eigvals, float(damping))
