"""Kronecker-factored curvature with per-layer eigenvalue correction.

Per layer, the curvature of [W | b] is approximated in the Kronecker
eigenbasis built from the second moments of bias-augmented layer inputs (A)
and pre-activation gradients (S); the diagonal there is then re-estimated
from true per-example gradients, which fixes both the Kronecker structure
error and any factor-scaling convention. Convolutions are unfolded to dense
patches, so their per-example gradient is the patch-position sum of outer
products. Gradients are the empirical per-example loss gradients at the
stored labels, accumulated over the full training set in two fixed-order
passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import Dataset
from ..errors import ConfigurationError
from ..models import Checkpoint, network_for


@dataclass(frozen=True)
class EkfacLayer:
    name: str
    in_dim: int  # without the bias column
    out_dim: int
    input_basis: np.ndarray      # (in_dim + 1, in_dim + 1)
    cotangent_basis: np.ndarray  # (out_dim, out_dim)
    eigenvalues: np.ndarray      # (out_dim, in_dim + 1), corrected, >= 0


@dataclass(frozen=True)
class EkfacCurvature:
    layers: tuple[EkfacLayer, ...]
    damping: float

    def layer(self, name: str) -> EkfacLayer | None:
        for l in self.layers:
            if l.name == name:
                return l
        return None

    def ihvp(self, net, grad: np.ndarray) -> np.ndarray:
        """Damped inverse-curvature product; out-of-scope layers map to zero."""
        out = np.zeros_like(grad)
        blocks = net.split_vector(grad)
        for l in self.layers:
            w, b = blocks[l.name]
            g = np.concatenate([w, b[:, None]], axis=1)
            gt = l.cotangent_basis.T @ g @ l.input_basis
            xt = gt / (l.eigenvalues + self.damping)
            x = l.cotangent_basis @ xt @ l.input_basis.T
            start, stop = net.layer_offsets[l.name]
            out[start:start + w.size] = x[:, :-1].ravel()
            out[start + w.size:stop] = x[:, -1]
        return out


def _augmented(a: np.ndarray) -> np.ndarray:
    ones = np.ones(a.shape[:-1] + (1,), dtype=a.dtype)
    return np.concatenate([a, ones], axis=-1)


def fit_ekfac(ckpt: Checkpoint, train: Dataset, damping: float | None,
              layers_in_scope=None, batch_size: int = 256) -> EkfacCurvature:
    net = network_for(ckpt.arch)
    names = [l.name for l in net.param_layers]
    scope = list(names) if layers_in_scope is None else list(layers_in_scope)
    unknown = set(scope) - set(names)
    if unknown:
        raise ConfigurationError(f"layers not in this architecture: {sorted(unknown)}")
    if not scope:
        raise ConfigurationError("ekfac needs at least one layer in scope")

    n = len(train)
    a_moment: dict[str, np.ndarray] = {}
    s_moment: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}

    def batches():
        for lo in range(0, n, batch_size):
            positions = np.arange(lo, min(lo + batch_size, n))
            images, labels = train.batch(positions)
            _, stats = net.layer_stats(ckpt.params, images, labels)
            yield {l.name: (a, s) for l, a, s in stats}

    for stat in batches():
        for name in scope:
            a, s = stat[name]
            a2 = _augmented(a).reshape(-1, a.shape[-1] + 1)
            s2 = s.reshape(-1, s.shape[-1])
            if name not in a_moment:
                a_moment[name] = np.zeros((a2.shape[1], a2.shape[1]))
                s_moment[name] = np.zeros((s2.shape[1], s2.shape[1]))
                counts[name] = 0
            a_moment[name] += a2.T @ a2
            s_moment[name] += s2.T @ s2
            counts[name] += len(a2)

    bases = {}
    for name in scope:
        _, u_a = np.linalg.eigh(a_moment[name] / counts[name])
        _, u_s = np.linalg.eigh(s_moment[name] / counts[name])
        bases[name] = (u_a, u_s)

    corrected = {name: np.zeros((bases[name][1].shape[0], bases[name][0].shape[0]))
                 for name in scope}
    for stat in batches():
        for name in scope:
            a, s = stat[name]
            u_a, u_s = bases[name]
            if a.ndim == 3:  # conv: sum outer products over patch positions
                g = np.einsum("bto,bti->boi", s, _augmented(a))
                gt = np.einsum("boi,op,iq->bpq", g, u_s, u_a, optimize=True)
                corrected[name] += np.square(gt).sum(axis=0)
            else:  # dense: rank-one per example, so the moment factorizes
                st = np.square(s @ u_s)
                at = np.square(_augmented(a) @ u_a)
                corrected[name] += st.T @ at
    for name in scope:
        corrected[name] /= n

    if damping is None:
        total = sum(corrected[name].sum() for name in scope)
        size = sum(corrected[name].size for name in scope)
        damping = 1e-3 * total / size
        if damping <= 0.0:
            damping = 1e-8
    layers = tuple(EkfacLayer(name, bases[name][0].shape[0] - 1,
                              bases[name][1].shape[0], bases[name][0],
                              bases[name][1], corrected[name])
                   for name in names if name in scope)
    return EkfacCurvature(layers, float(damping))
