"""Feed-forward network engine on flat float64 parameter vectors.

Everything is written against plain numpy so that per-example gradients,
curvature statistics, and input-space gradients of gradient functionals are
all available without a framework. All arithmetic is dtype-generic: passing
complex parameters yields complex-step derivatives to machine precision
(branching uses only the real part, matching autodiff's treatment of the
piecewise-linear nonlinearities).

Public interfaces take images as (B, C, H, W); internally activations are
kept channels-last so conv patch extraction and scatter-back reduce to
strided slice arithmetic feeding BLAS matmuls.

Per-example parameter gradients of the softmax cross-entropy loss are never
materialized unless asked for; the engine exposes per-layer (input, output
cotangent) statistics from which callers build summed gradients, gradient
dot products against fixed vectors, Kronecker curvature factors, and squared
gradient moments.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError, InputError, UnsupportedOperationError
from .arch import ArchSpec, iter_shapes


class _Dense:
    parametric = True

    def __init__(self, name: str, in_dim: int, out_dim: int):
        self.name, self.in_dim, self.out_dim = name, in_dim, out_dim
        self.w_size = out_dim * in_dim
        self.n_params = self.w_size + out_dim

    def unpack(self, block: np.ndarray):
        return block[:self.w_size].reshape(self.out_dim, self.in_dim), block[self.w_size:]

    def forward(self, x, wb):
        w, b = wb
        return x @ w.T + b, x

    def backward_input(self, s, cache, wb):
        return s @ wb[0]

    def forward_linear(self, t, cache, wb):
        return t @ wb[0].T


class _Conv:
    """3x3-style convolution over channels-last activations via im2col.

    Weights are stored (out_ch, k*k*in_ch) with kernel-position-major
    columns, matching the (B, T, k*k*in_ch) patch layout produced below.
    """

    parametric = True

    def __init__(self, name: str, in_shape, k: int, out_ch: int, stride: int):
        c, h, w = in_shape  # logical (C, H, W)
        self.name, self.k, self.out_ch, self.stride = name, k, out_ch, stride
        self.in_ch, self.pad = c, k // 2
        hp, wp = h + 2 * self.pad, w + 2 * self.pad
        self.ho = (hp - k) // stride + 1
        self.wo = (wp - k) // stride + 1
        self.in_hw, self.padded_hw = (h, w), (hp, wp)
        self.patch_dim = k * k * c
        self.w_size = out_ch * self.patch_dim
        self.n_params = self.w_size + out_ch

    def unpack(self, block: np.ndarray):
        return block[:self.w_size].reshape(self.out_ch, self.patch_dim), block[self.w_size:]

    def _im2col(self, x):
        # x: (B, H, W, C) -> patches (B, T, k*k*C), one strided copy per offset.
        b = x.shape[0]
        p = self.pad
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        k, st, ho, wo, c = self.k, self.stride, self.ho, self.wo, self.in_ch
        patches = np.empty((b, ho * wo, k * k, c), dtype=x.dtype)
        for u in range(k * k):
            ky, kx = divmod(u, k)
            window = xp[:, ky:ky + st * ho:st, kx:kx + st * wo:st, :]
            patches[:, :, u, :] = window.reshape(b, ho * wo, c)
        return patches.reshape(b, ho * wo, self.patch_dim)

    def _col2im(self, dpatches):
        # dpatches: (B, T, k*k*C) -> input cotangent (B, H, W, C).
        b = dpatches.shape[0]
        k, st, ho, wo, c = self.k, self.stride, self.ho, self.wo, self.in_ch
        hp, wp = self.padded_hw
        dxp = np.zeros((b, hp, wp, c), dtype=dpatches.dtype)
        dp = dpatches.reshape(b, ho, wo, k * k, c)
        for u in range(k * k):
            ky, kx = divmod(u, k)
            dxp[:, ky:ky + st * ho:st, kx:kx + st * wo:st, :] += dp[:, :, :, u, :]
        p = self.pad
        h, w = self.in_hw
        return dxp[:, p:p + h, p:p + w, :] if p else dxp

    def forward(self, x, wb):
        w, b = wb
        patches = self._im2col(x)
        y = patches.reshape(-1, self.patch_dim) @ w.T
        y = y.reshape(x.shape[0], self.ho, self.wo, self.out_ch) + b
        return y, patches

    @staticmethod
    def to_s_form(dy):
        # (B, Ho, Wo, out) -> (B, T, out), a pure view.
        return dy.reshape(dy.shape[0], -1, dy.shape[-1])

    def to_image(self, y_bto):
        return y_bto.reshape(y_bto.shape[0], self.ho, self.wo, self.out_ch)

    def backward_input(self, s, cache, wb, extra_patch_cot=None):
        dpatches = (s.reshape(-1, self.out_ch) @ wb[0]).reshape(s.shape[0], -1,
                                                                self.patch_dim)
        if extra_patch_cot is not None:
            dpatches = dpatches + extra_patch_cot
        return self._col2im(dpatches)

    def forward_linear(self, t, cache, wb):
        patches = self._im2col(t)
        y = patches.reshape(-1, self.patch_dim) @ wb[0].T
        return y.reshape(t.shape[0], self.ho, self.wo, self.out_ch)


class _ReLU:
    parametric = False

    def forward(self, x, wb):
        mask = x.real > 0
        return np.where(mask, x, 0.0), mask

    def backward_input(self, dy, mask, wb):
        return np.where(mask, dy, 0.0)

    forward_linear = backward_input


class _AvgPool:
    parametric = False

    def __init__(self, factor: int):
        self.factor = factor

    def forward(self, x, wb):
        f = self.factor
        b, h, w, c = x.shape
        pooled = x.reshape(b, h // f, f, w // f, f, c).mean(axis=(2, 4))
        return pooled, (h, w)

    def backward_input(self, dy, cache, wb):
        f = self.factor
        h, w = cache
        b, ho, wo, c = dy.shape
        spread = np.broadcast_to(dy[:, :, None, :, None, :] / (f * f),
                                 (b, ho, f, wo, f, c))
        return spread.reshape(b, h, w, c)

    def forward_linear(self, t, cache, wb):
        return self.forward(t, wb)[0]


class _Flatten:
    parametric = False

    def forward(self, x, wb):
        return x.reshape(x.shape[0], -1), x.shape[1:]

    def backward_input(self, dy, cache, wb):
        return dy.reshape(dy.shape[0], *cache)

    def forward_linear(self, t, cache, wb):
        return t.reshape(t.shape[0], -1)


class Network:
    """Executable form of an :class:`ArchSpec` over a flat parameter vector."""

    def __init__(self, arch: ArchSpec):
        self.arch = arch
        self.layers = []
        counts = {"conv": 0, "dense": 0}
        for layer, in_shape in iter_shapes(arch):
            kind = layer[0]
            if kind == "conv":
                name = f"conv{counts['conv']}"
                counts["conv"] += 1
                self.layers.append(_Conv(name, in_shape, layer[1], layer[2], layer[3]))
            elif kind == "dense":
                name = f"dense{counts['dense']}"
                counts["dense"] += 1
                self.layers.append(_Dense(name, in_shape, layer[1]))
            elif kind == "relu":
                self.layers.append(_ReLU())
            elif kind == "avgpool":
                self.layers.append(_AvgPool(layer[1]))
            elif kind == "flatten":
                self.layers.append(_Flatten())

        self.param_layers = [l for l in self.layers if l.parametric]
        self.layer_offsets: dict[str, tuple[int, int]] = {}
        offset = 0
        for l in self.param_layers:
            self.layer_offsets[l.name] = (offset, offset + l.n_params)
            offset += l.n_params
        self.param_count = offset

    # -- parameters -----------------------------------------------------------

    def init_params(self, seed: int) -> np.ndarray:
        # Fan-in-scaled uniform; the 1.7 gain keeps ReLU stacks from
        # attenuating and trains stably at the default learning rate.
        g = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA11]))
        params = np.zeros(self.param_count)
        for l in self.param_layers:
            start, stop = self.layer_offsets[l.name]
            fan_in = l.in_dim if isinstance(l, _Dense) else l.patch_dim
            bound = 1.7 / np.sqrt(fan_in)
            params[start:start + l.w_size] = g.uniform(-bound, bound, size=l.w_size)
        return params

    def _wb(self, params, layer):
        start, stop = self.layer_offsets[layer.name]
        return layer.unpack(params[start:stop])

    def split_vector(self, vec: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Flat parameter-space vector -> per-layer (W-shaped, b-shaped) views."""
        return {l.name: l.unpack(vec[s:e])
                for l in self.param_layers
                for s, e in [self.layer_offsets[l.name]]}

    def flatten_blocks(self, blocks: dict[str, tuple[np.ndarray, np.ndarray]],
                       dtype=np.float64) -> np.ndarray:
        vec = np.zeros(self.param_count, dtype=dtype)
        for l in self.param_layers:
            start, stop = self.layer_offsets[l.name]
            w, b = blocks[l.name]
            vec[start:start + l.w_size] = w.ravel()
            vec[start + l.w_size:stop] = b
        return vec

    # -- forward / loss ---------------------------------------------------------

    def _check_input(self, images):
        if tuple(images.shape[1:]) != self.arch.input_shape:
            raise InputError(f"input shape {tuple(images.shape[1:])} does not match "
                             f"architecture input {self.arch.input_shape}")

    @staticmethod
    def _to_internal(images):
        # (B, C, H, W) -> channels-last, contiguous for the conv slice walks.
        return np.ascontiguousarray(images.transpose(0, 2, 3, 1))

    @staticmethod
    def _to_external(grads):
        return np.ascontiguousarray(grads.transpose(0, 3, 1, 2))

    def _forward(self, params, x, want_caches: bool):
        caches = [] if want_caches else None
        for l in self.layers:
            wb = self._wb(params, l) if l.parametric else None
            x, cache = l.forward(x, wb)
            if want_caches:
                caches.append(cache)
        return x, caches

    def logits(self, params, images) -> np.ndarray:
        self._check_input(images)
        return self._forward(params, self._to_internal(images), False)[0]

    @staticmethod
    def _softmax_terms(logits, labels):
        shift = logits - logits.real.max(axis=1, keepdims=True)
        e = np.exp(shift)
        z = e.sum(axis=1, keepdims=True)
        probs = e / z
        idx = np.arange(len(labels))
        losses = np.log(z[:, 0]) - shift[idx, labels]
        return losses, probs

    def losses(self, params, images, labels) -> np.ndarray:
        return self._softmax_terms(self.logits(params, images), labels)[0]

    # -- reverse sweeps ---------------------------------------------------------

    def _backward(self, params, caches, dlogits, need_input_grad=False, inject=None):
        """Reverse sweep from logit cotangents.

        Returns per-parametric-layer stats [(layer, a, s)] in forward order
        plus the input cotangent when requested. ``inject`` adds extra
        cotangents at a parametric layer's input (patch space for conv),
        keyed by layer name; used by the double-backprop path.
        """
        inject = inject or {}
        stats = []
        u = dlogits
        lowest = self.param_layers[0]
        for i in range(len(self.layers) - 1, -1, -1):
            l = self.layers[i]
            if l.parametric:
                wb = self._wb(params, l)
                if isinstance(l, _Conv):
                    s = l.to_s_form(u)
                    stats.append((l, caches[i], s))
                    if l is lowest and not need_input_grad and not inject:
                        break
                    u = l.backward_input(s, caches[i], wb,
                                         extra_patch_cot=inject.get(l.name))
                else:
                    stats.append((l, caches[i], u))
                    if l is lowest and not need_input_grad and not inject:
                        break
                    u = l.backward_input(u, caches[i], wb)
                    if l.name in inject:
                        u = u + inject[l.name]
            else:
                u = l.backward_input(u, caches[i], None)
        stats.reverse()
        return stats, (u if need_input_grad else None)

    def layer_stats(self, params, images, labels):
        """Per-example losses plus per-layer (input, output-cotangent) pairs.

        The cotangents are the unreduced single-example loss gradients, so
        for a dense layer the per-example weight gradient is s a^T and for a
        conv layer it is sum_t s_t a_t^T over patch positions.
        """
        self._check_input(images)
        logits, caches = self._forward(params, self._to_internal(images), True)
        losses, probs = self._softmax_terms(logits, labels)
        dlogits = probs.copy()
        dlogits[np.arange(len(labels)), labels] -= 1.0
        stats, _ = self._backward(params, caches, dlogits)
        return losses, stats

    def fisher_layer_stats(self, params, images):
        """Per-class stats whose squared accumulation is the model Fisher.

        For each class k the cotangent is (p - onehot_k) * sqrt(p_k), so
        summing outer products over classes and examples yields
        E_x E_{y~p(y|x)} [g g^T] without sampling. The forward pass is shared
        across classes.
        """
        self._check_input(images)
        logits, caches = self._forward(params, self._to_internal(images), True)
        shift = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = shift / shift.sum(axis=1, keepdims=True)
        per_class = []
        for k in range(logits.shape[1]):
            dlogits = probs.copy()
            dlogits[:, k] -= 1.0
            dlogits *= np.sqrt(probs[:, k])[:, None]
            stats, _ = self._backward(params, caches, dlogits)
            per_class.append(stats)
        return per_class

    # -- gradient consumers ------------------------------------------------------

    def loss_and_grad_sum(self, params, images, labels):
        """(mean loss, gradient of the summed loss) over the batch."""
        losses, stats = self.layer_stats(params, images, labels)
        grad = np.zeros(self.param_count, dtype=losses.dtype)
        for l, a, s in stats:
            start, _ = self.layer_offsets[l.name]
            gw = grad[start:start + l.w_size]
            gb = grad[start + l.w_size:start + l.n_params]
            if isinstance(l, _Conv):
                s2 = s.reshape(-1, l.out_ch)
                gw += (s2.T @ a.reshape(-1, l.patch_dim)).ravel()
                gb += s2.sum(axis=0)
            else:
                gw += (s.T @ a).ravel()
                gb += s.sum(axis=0)
        return losses.mean(), grad

    def grad_sum_from_dlogits(self, params, images, dlogits) -> np.ndarray:
        """Summed parameter gradient for an arbitrary logit cotangent.

        Lets callers differentiate losses other than cross-entropy
        (distillation targets, ascent objectives) without reimplementing the
        reverse sweep.
        """
        self._check_input(images)
        _, caches = self._forward(params, self._to_internal(images), True)
        stats, _ = self._backward(params, caches, dlogits)
        grad = np.zeros(self.param_count, dtype=dlogits.dtype)
        for l, a, s in stats:
            start, _ = self.layer_offsets[l.name]
            gw = grad[start:start + l.w_size]
            gb = grad[start + l.w_size:start + l.n_params]
            if isinstance(l, _Conv):
                s2 = s.reshape(-1, l.out_ch)
                gw += (s2.T @ a.reshape(-1, l.patch_dim)).ravel()
                gb += s2.sum(axis=0)
            else:
                gw += (s.T @ a).ravel()
                gb += s.sum(axis=0)
        return grad

    def per_example_grads(self, params, images, labels) -> np.ndarray:
        """(B, P) matrix of single-example loss gradients."""
        losses, stats = self.layer_stats(params, images, labels)
        b = len(images)
        grads = np.zeros((b, self.param_count), dtype=losses.dtype)
        for l, a, s in stats:
            start, _ = self.layer_offsets[l.name]
            gw = grads[:, start:start + l.w_size]
            gb = grads[:, start + l.w_size:start + l.n_params]
            if isinstance(l, _Conv):
                gw[:] = np.einsum("bto,bti->boi", s, a).reshape(b, -1)
                gb[:] = s.sum(axis=1)
            else:
                gw[:] = (s[:, :, None] * a[:, None, :]).reshape(b, -1)
                gb[:] = s
        return grads

    def grad_dots(self, params, images, labels, vectors: np.ndarray) -> np.ndarray:
        """(B, m) dot products of per-example gradients with m flat vectors.

        Contracts layer-by-layer so the per-example gradients are never
        materialized; this is the workhorse behind influence vectors.
        """
        vectors = np.atleast_2d(vectors)
        losses, stats = self.layer_stats(params, images, labels)
        b, m = len(images), len(vectors)
        dots = np.zeros((b, m), dtype=losses.dtype)
        for l, a, s in stats:
            start, _ = self.layer_offsets[l.name]
            vw = vectors[:, start:start + l.w_size]
            vb = vectors[:, start + l.w_size:start + l.n_params]
            if isinstance(l, _Conv):
                out, pd = l.out_ch, l.patch_dim
                s2, a2 = s.reshape(-1, out), a.reshape(-1, pd)
                for j in range(m):
                    prod = (s2 @ vw[j].reshape(out, pd)) * a2
                    dots[:, j] += prod.reshape(b, -1).sum(axis=1)
                dots += s.sum(axis=1) @ vb.T
            else:
                for j in range(m):
                    dots[:, j] += ((s @ vw[j].reshape(l.out_dim, l.in_dim)) * a).sum(axis=1)
                dots += s @ vb.T
        return dots

    # -- double backprop ----------------------------------------------------------

    def input_grad_of_grad_dot(self, params, images, labels, vector: np.ndarray):
        """Per-example input gradient of phi_b = <grad_theta loss_b, vector>.

        Used by gradient-matching poison crafting. Decomposes d(phi)/dx into
        the path through the forward activations and the path through the
        logit cotangents, both resolved with ordinary reverse sweeps.
        """
        self._check_input(images)
        logits, caches = self._forward(params, self._to_internal(images), True)
        _, probs = self._softmax_terms(logits, labels)
        dlogits = probs.copy()
        dlogits[np.arange(len(labels)), labels] -= 1.0
        stats, _ = self._backward(params, caches, dlogits)

        split = self.split_vector(vector)
        cache_of = {l.name: a for l, a, _ in stats}
        s_of = {l.name: s for l, _, s in stats}

        # Upward linear sweep: push w_l = (V a + v_b) injections to the logits.
        t = None
        for i, l in enumerate(self.layers):
            wb = self._wb(params, l) if l.parametric else None
            if t is not None:
                t = l.forward_linear(t, caches[i], wb)
            if l.parametric:
                vw, vb = split[l.name]
                w_out = cache_of[l.name] @ vw.T + vb
                if isinstance(l, _Conv):
                    w_out = l.to_image(w_out)
                t = w_out if t is None else t + w_out
        r = t  # (B, K)

        # Transpose-Jacobian of the softmax cotangent, then sweep down with
        # the activation-path injections c_l = V^T s_l.
        pr = (probs * r).sum(axis=1, keepdims=True)
        q = probs * r - probs * pr
        inject = {l.name: s_of[l.name] @ split[l.name][0] for l in self.param_layers}
        _, input_grad = self._backward(params, caches, q,
                                       need_input_grad=True, inject=inject)
        return self._to_external(input_grad)

    # -- activations ---------------------------------------------------------------

    def last_hidden(self, params, images) -> np.ndarray:
        """Post-nonlinearity input of the final dense head."""
        if len(self.param_layers) < 2:
            raise UnsupportedOperationError(
                "architecture has no hidden layer; activation-based detectors "
                "are undefined for a pure logistic model")
        if not isinstance(self.layers[-1], _Dense):
            raise ConfigurationError("network must end in a dense head")
        self._check_input(images)
        x = self._to_internal(images)
        for l in self.layers[:-1]:
            wb = self._wb(params, l) if l.parametric else None
            x, _ = l.forward(x, wb)
        return x


_NETWORK_CACHE: dict[ArchSpec, Network] = {}


def network_for(arch: ArchSpec) -> Network:
    net = _NETWORK_CACHE.get(arch)
    if net is None:
        net = _NETWORK_CACHE[arch] = Network(arch)
    return net
