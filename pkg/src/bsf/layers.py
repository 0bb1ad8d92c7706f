"""Layers of the desk-scale training engine.

Every layer implements forward(x, training) and backward(upstream) on numpy
arrays, caching whatever the backward pass needs.  Spatial tensors flow
through the stack in channels-last layout (N, H, W, C): batch norm and
flatten are then pure reshapes and the im2col copy runs along contiguous
rows.  The network boundary accepts channels-first input and converts once.

Convolutions are stride-1 with zero same-padding, computed as one small GEMM
per filter tap over shifted copies of the input.  Conv and dense layers keep
real-valued shadow weights binarized on every forward pass; in the separable
modes each binarized conv filter is additionally replaced by its rank-1 table
entry.  Backward either gates the approximated-filter gradient straight
through (eSTE) or first pulls it through the precomputed rank-1 Jacobians,
then gates.

A layer can be switched to `surrogate` mode, where every binarization is the
identity and the straight-through gates are disabled; the whole stack is then
an ordinary differentiable network, which is what the finite-difference
checks in the tests run against.
"""

from __future__ import annotations

import numpy as np

from .sepfilter import FilterLut, batch_filter_keys
from .svdgrad import JacobianTable

MODE_FULL = "full-binary"
MODE_SEP1 = "separable-method1"
MODE_SEP2 = "separable-method2"
CONV_MODES = (MODE_FULL, MODE_SEP1, MODE_SEP2)


class ConfigurationError(ValueError):
    """Layer built with inconsistent options (e.g. separable mode without a table)."""


class BatchStatsError(ValueError):
    """Batch statistics requested on a batch too small to define them."""


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _sign(x: np.ndarray) -> np.ndarray:
    # hot-path binarize without the finite check; the optimizer step still
    # rejects non-finite gradients, so NaNs cannot pass silently
    out = np.empty_like(x)
    np.copyto(out, 1.0)
    np.copyto(out, -1.0, where=x < 0)
    return out


def _gate(upstream: np.ndarray, pre: np.ndarray) -> np.ndarray:
    return np.where(np.abs(pre) <= 1.0, upstream, 0.0).astype(upstream.dtype, copy=False)


def _shift_stack(x: np.ndarray, d: int) -> np.ndarray:
    """(N, H, W, C) -> (d*d, N*H*W, C): one contiguous shifted copy per filter tap.

    Equivalent to an im2col with the tap axis leading; each tap block is a
    plain slice of the zero-padded input, so the gather runs along long
    contiguous rows instead of per-pixel patches.
    """
    n, h, w, c = x.shape
    p = d // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    taps = np.empty((d * d, n, h, w, c), dtype=x.dtype)
    for r in range(d):
        for s in range(d):
            taps[r * d + s] = xp[:, r : r + h, s : s + w, :]
    return taps.reshape(d * d, n * h * w, c)


def _weights_to_gemm(w: np.ndarray) -> np.ndarray:
    """(M, C, d, d) filters -> (d*d, C, M) per-tap matrices."""
    m, c, d, _ = w.shape
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(d * d, c, m)


def _conv_from_taps(taps: np.ndarray, w_taps: np.ndarray) -> np.ndarray:
    if taps.shape[2] == 1:
        # single input channel: fold the taps into the contraction axis
        return taps[:, :, 0].T @ w_taps[:, 0, :]
    out = taps[0] @ w_taps[0]
    for t in range(1, len(w_taps)):
        out += taps[t] @ w_taps[t]
    return out


def conv2d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-1 zero same-padded convolution on (N, H, W, C); w is (M, C, d, d)."""
    n, h, width, _ = x.shape
    out = _conv_from_taps(_shift_stack(x, w.shape[-1]), _weights_to_gemm(w))
    return out.reshape(n, h, width, w.shape[0])


class Layer:
    """Minimal layer protocol; parameter-free layers keep the defaults."""

    name = "layer"

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[tuple[str, np.ndarray, np.ndarray, bool]]:
        """(name, value, gradient, clip_to_unit) per trainable array."""
        return []

    def _take_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise RuntimeError(f"{self.name}: backward called without a fresh forward cache")
        self._cache = None
        return cache


class BinaryConv2d(Layer):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        ksize: int = 3,
        mode: str = MODE_FULL,
        *,
        lut: FilterLut | None = None,
        jacobian_table: JacobianTable | None = None,
        rng: np.random.Generator,
        dtype=np.float64,
        surrogate: bool = False,
        name: str = "conv",
    ):
        if mode not in CONV_MODES:
            raise ConfigurationError(f"unknown conv mode {mode!r}")
        if ksize % 2 == 0 or ksize < 1:
            raise ConfigurationError(f"filter side must be odd and >= 1, got {ksize}")
        if mode != MODE_FULL:
            if ksize < 3:
                raise ConfigurationError("separable modes need filter side >= 3")
            if lut is None or lut.d != ksize:
                raise ConfigurationError(f"{mode} needs a FilterLut for d={ksize}")
        if mode == MODE_SEP2 and (jacobian_table is None or jacobian_table.d != ksize):
            raise ConfigurationError(f"{mode} needs a JacobianTable for d={ksize}")
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.ksize = ksize
        self.mode = mode
        self.lut = lut
        self.jacobian_table = jacobian_table
        self.surrogate = surrogate
        self.needs_input_grad = True
        self.dtype = np.dtype(dtype)
        fan = ksize * ksize
        self.shadow = _glorot(
            rng,
            (out_channels, in_channels, ksize, ksize),
            in_channels * fan,
            out_channels * fan,
            self.dtype,
        )
        self.g_shadow = np.zeros_like(self.shadow)
        self._cache = None

    def effective_weights(self) -> tuple[np.ndarray, np.ndarray | None]:
        """Weights the convolution actually uses, plus filter keys in separable modes."""
        if self.surrogate:
            return self.shadow, None
        wb = _sign(self.shadow)
        if self.mode == MODE_FULL:
            return wb, None
        keys = batch_filter_keys(wb).reshape(-1)
        codes = self.lut.codes[keys]
        outers = self.lut.outer_products()[codes].astype(self.dtype)
        w_eff = outers.reshape(self.shadow.shape)
        return w_eff, keys

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ValueError(
                f"{self.name}: expected (N, H, W, {self.in_channels}) input, got {x.shape}"
            )
        w_eff, keys = self.effective_weights()
        n, h, w, _ = x.shape
        taps = _shift_stack(x, self.ksize)
        out = _conv_from_taps(taps, _weights_to_gemm(w_eff))
        self._cache = (taps, w_eff, keys, x.shape)
        return out.reshape(n, h, w, self.out_channels)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        taps, w_eff, keys, x_shape = self._take_cache()
        n, h, w, _ = x_shape
        d = self.ksize
        up_flat = upstream.reshape(n * h * w, self.out_channels)

        # weight gradient: one (C, M) matrix per tap from the cached shifts
        g_w_taps = np.empty((d * d, self.in_channels, self.out_channels), dtype=up_flat.dtype)
        for t in range(d * d):
            g_w_taps[t] = taps[t].T @ up_flat
        g_w = np.ascontiguousarray(
            g_w_taps.reshape(d, d, self.in_channels, self.out_channels).transpose(3, 2, 0, 1)
        )

        # input gradient: the transposed convolution is the same tap-GEMM sum
        # over shifted upstream with each tap matrix spatially flipped
        g_x = None
        if self.needs_input_grad:
            w_taps = _weights_to_gemm(w_eff)
            up_taps = _shift_stack(upstream, d)
            g_x_flat = up_taps[0] @ w_taps[d * d - 1].T
            for t in range(1, d * d):
                g_x_flat += up_taps[t] @ w_taps[d * d - 1 - t].T
            g_x = g_x_flat.reshape(n, h, w, self.in_channels)

        if self.mode == MODE_SEP2 and not self.surrogate:
            g_w = self._pull_through_jacobians(g_w, keys)
        if self.surrogate:
            self.g_shadow = g_w
        else:
            self.g_shadow = _gate(g_w, self.shadow)
        return g_x

    def _pull_through_jacobians(self, g_w: np.ndarray, keys: np.ndarray) -> np.ndarray:
        table = self.jacobian_table
        nsq = self.ksize * self.ksize
        flat = np.ascontiguousarray(g_w).reshape(-1, nsq)
        out = np.empty_like(flat)
        deg = table.degenerate[keys]
        if deg.any():
            out[deg] = flat[deg]
        live = ~deg
        if live.any():
            jac = table.jacobians[keys[live]].astype(flat.dtype)
            out[live] = np.einsum("fk,fkc->fc", flat[live], jac)
        return out.reshape(g_w.shape)

    def params(self):
        return [("shadow", self.shadow, self.g_shadow, True)]


class BinaryDense(Layer):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        *,
        rng: np.random.Generator,
        dtype=np.float64,
        surrogate: bool = False,
        name: str = "dense",
    ):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.surrogate = surrogate
        self.dtype = np.dtype(dtype)
        self.shadow = _glorot(rng, (out_features, in_features), in_features, out_features, self.dtype)
        self.g_shadow = np.zeros_like(self.shadow)
        self._cache = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"{self.name}: expected (N, {self.in_features}) input, got {x.shape}")
        w = self.shadow if self.surrogate else _sign(self.shadow)
        self._cache = (x, w)
        return x @ w.T

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        x, w = self._take_cache()
        g_w = upstream.T @ x
        self.g_shadow = g_w if self.surrogate else _gate(g_w, self.shadow)
        return upstream @ w

    def params(self):
        return [("shadow", self.shadow, self.g_shadow, True)]


class BatchNorm(Layer):
    """Per-feature normalization; the feature axis is the last one."""

    def __init__(
        self,
        features: int,
        *,
        eps: float = 1e-4,
        momentum: float = 0.9,
        dtype=np.float64,
        name: str = "bn",
    ):
        self.name = name
        self.features = features
        self.eps = eps
        self.momentum = momentum
        self.dtype = np.dtype(dtype)
        self.gamma = np.ones(features, dtype=self.dtype)
        self.beta = np.zeros(features, dtype=self.dtype)
        self.running_mean = np.zeros(features, dtype=self.dtype)
        self.running_var = np.ones(features, dtype=self.dtype)
        self.g_gamma = np.zeros_like(self.gamma)
        self.g_beta = np.zeros_like(self.beta)
        self._cache = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        if x.shape[-1] != self.features:
            raise ValueError(f"{self.name}: feature axis {x.shape[-1]} != {self.features}")
        flat = x.reshape(-1, self.features)
        if training:
            if x.shape[0] < 2:
                raise BatchStatsError(
                    f"{self.name}: batch size {x.shape[0]} too small for batch statistics"
                )
            mean = flat.mean(axis=0)
            diff = flat - mean
            var = np.einsum("ij,ij->j", diff, diff) / flat.shape[0]
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mean
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = diff
            xhat *= inv_std
            out = xhat * self.gamma + self.beta
            self._cache = (xhat, inv_std, x.shape, training)
            return out.reshape(x.shape).astype(x.dtype, copy=False)
        mean = self.running_mean
        var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = flat - mean
        xhat *= inv_std
        out = xhat * self.gamma + self.beta
        self._cache = (xhat, inv_std, x.shape, training)
        return out.reshape(x.shape).astype(x.dtype, copy=False)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        xhat, inv_std, shape, training = self._take_cache()
        up = upstream.reshape(-1, self.features)
        self.g_gamma = (up * xhat).sum(axis=0)
        self.g_beta = up.sum(axis=0)
        if training:
            g_xhat = up * self.gamma
            g_flat = inv_std * (
                g_xhat - g_xhat.mean(axis=0) - xhat * (g_xhat * xhat).mean(axis=0)
            )
        else:
            g_flat = up * self.gamma * inv_std
        return g_flat.reshape(shape).astype(upstream.dtype, copy=False)

    def params(self):
        return [
            ("gamma", self.gamma, self.g_gamma, False),
            ("beta", self.beta, self.g_beta, False),
        ]


class MaxPool2x2(Layer):
    """Non-overlapping 2x2 max pooling; gradient routes to the first max in scan order."""

    name = "pool"

    @staticmethod
    def _window_views(x: np.ndarray):
        # the four window positions in scan order (0,0), (0,1), (1,0), (1,1)
        return (
            x[:, 0::2, 0::2, :],
            x[:, 0::2, 1::2, :],
            x[:, 1::2, 0::2, :],
            x[:, 1::2, 1::2, :],
        )

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"{self.name}: spatial dims must be even, got {h}x{w}")
        views = self._window_views(x)
        out = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))
        # earliest window position attaining the max wins ties
        arg = np.where(
            views[0] == out, 0, np.where(views[1] == out, 1, np.where(views[2] == out, 2, 3))
        ).astype(np.int8)
        self._cache = (arg, x.shape)
        return out

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        arg, shape = self._take_cache()
        g = np.zeros(shape, dtype=upstream.dtype)
        for k, view in enumerate(self._window_views(g)):
            view[...] = np.where(arg == k, upstream, 0.0)
        return g


class BinaryActivation(Layer):
    """Sign activation with the hard-tanh straight-through backward."""

    name = "binact"

    def __init__(self, surrogate: bool = False):
        self.surrogate = surrogate
        self._cache = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        self._cache = x
        return x if self.surrogate else _sign(x)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        pre = self._take_cache()
        return upstream if self.surrogate else _gate(upstream, pre)


class Flatten(Layer):
    name = "flatten"

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        return upstream.reshape(self._take_cache())


def square_hinge_loss(scores: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean squared hinge over classes (and batch): mean max(0, 1 - t*s)^2, t = +-1.

    Accepts a (K,) score vector with an int target or a (N, K) batch with
    (N,) targets; returns the loss and its gradient w.r.t. the scores.
    """
    scores = np.asarray(scores, dtype=np.float64)
    single = scores.ndim == 1
    if single:
        scores = scores[None, :]
        targets = np.asarray([targets])
    else:
        targets = np.asarray(targets)
    n, k = scores.shape
    if k < 2:
        raise ValueError("need at least 2 classes")
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"target out of range [0, {k})")
    t = -np.ones_like(scores)
    t[np.arange(n), targets] = 1.0
    margins = 1.0 - t * scores
    active = margins > 0
    loss = float((active * margins**2).sum() / (n * k))
    grad = np.where(active, -2.0 * t * margins, 0.0) / (n * k)
    if single:
        grad = grad[0]
    return loss, grad
