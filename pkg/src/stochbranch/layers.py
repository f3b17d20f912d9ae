"""Layers with explicit forward/backward passes.

Every layer follows the same small protocol::

    y = layer.forward(x, mode, rng)   # rng only consumed by stochastic layers
    dx = layer.backward(dy)           # fills layer.grads, returns dL/dx

``params`` holds trainable arrays, ``buffers`` holds saved non-trainable state
(keep probabilities, running statistics). ``spec()`` returns the JSON-able
architecture record used by the model file and the network builder.
"""
from __future__ import annotations

import enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import DTYPE, ConstraintError, DomainError, ShapeError, StateError, as_tensor, bernoulli


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"
    # Stochastic layers sample as in TRAIN, normalisation layers behave as in
    # EVAL and nothing is cached or updated. Used to probe train-time
    # activation statistics without touching the model.
    SAMPLE = "sample"


def _samples(mode: Mode) -> bool:
    return mode in (Mode.TRAIN, Mode.SAMPLE)


class Layer:
    kind = "layer"
    stochastic = False

    def __init__(self, name: str = ""):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, mode=Mode.EVAL, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def output_shape(self, in_shape: tuple) -> tuple:
        return tuple(in_shape)

    def spec(self) -> dict:
        return {"kind": self.kind, "name": self.name}

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def __repr__(self):
        fields = ", ".join(f"{k}={v}" for k, v in self.spec().items() if k not in ("kind", "name"))
        return f"{type(self).__name__}({fields})"


def _need(cache, layer):
    if cache is None:
        raise StateError(f"{layer.name or layer.kind}: backward called before a TRAIN forward")
    return cache


def _check_features(x, expected, layer):
    if x.ndim != 2 or x.shape[1] != expected:
        raise ShapeError(f"{layer.name or layer.kind}: expected input (batch, {expected}), got {x.shape}")


# ---------------------------------------------------------------- activations


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode=Mode.EVAL, rng=None):
        x = as_tensor(x)
        if mode is Mode.TRAIN:
            self._gate = x > 0
        return np.maximum(x, 0.0)

    def backward(self, grad):
        # tie at exactly 0 passes no gradient
        return grad * _need(getattr(self, "_gate", None), self)


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x, mode=Mode.EVAL, rng=None):
        y = np.tanh(as_tensor(x))
        if mode is Mode.TRAIN:
            self._y = y
        return y

    def backward(self, grad):
        y = _need(getattr(self, "_y", None), self)
        return grad * (1.0 - y * y)


ACTIVATIONS = {"relu": ReLU, "tanh": Tanh}


# ---------------------------------------------------------------- shape plumbing


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, mode=Mode.EVAL, rng=None):
        x = as_tensor(x)
        if mode is Mode.TRAIN:
            self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(_need(getattr(self, "_shape", None), self))

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def __init__(self, kernel_size=2, name=""):
        super().__init__(name)
        self.kernel_size = int(kernel_size)

    def forward(self, x, mode=Mode.EVAL, rng=None):
        x = as_tensor(x)
        k = self.kernel_size
        b, c, h, w = x.shape
        oh, ow = h // k, w // k
        if oh == 0 or ow == 0:
            raise ShapeError(f"{self.name}: {h}x{w} input too small for {k}x{k} pooling")
        win = x[:, :, : oh * k, : ow * k].reshape(b, c, oh, k, ow, k)
        win = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, k * k)
        idx = np.argmax(win, axis=-1)[..., None]
        if mode is Mode.TRAIN:
            self._cache = (x.shape, idx)
        return np.take_along_axis(win, idx, axis=-1)[..., 0]

    def backward(self, grad):
        shape, idx = _need(getattr(self, "_cache", None), self)
        b, c, h, w = shape
        k = self.kernel_size
        oh, ow = h // k, w // k
        win = np.zeros((b, c, oh, ow, k * k), dtype=DTYPE)
        np.put_along_axis(win, idx, grad[..., None], axis=-1)
        win = win.reshape(b, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh * k, ow * k)
        dx = np.zeros(shape, dtype=DTYPE)
        dx[:, :, : oh * k, : ow * k] = win
        return dx

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h // self.kernel_size, w // self.kernel_size)

    def spec(self):
        return {**super().spec(), "kernel_size": self.kernel_size}


# ---------------------------------------------------------------- dropout


class Dropout(Layer):
    """Activation masking with expectation scaling at inference.

    Train multiplies by a fresh 0/1 mask with keep probability ``keep_prob``;
    Eval multiplies by ``keep_prob``. No inverse scaling at train time.
    """

    kind = "dropout"
    stochastic = True

    def __init__(self, keep_prob=0.5, name=""):
        super().__init__(name)
        if not 0.0 < keep_prob <= 1.0:
            raise DomainError(f"keep_prob must be in (0, 1], got {keep_prob}")
        self.keep_prob = float(keep_prob)
        self.last_mask = None

    def forward(self, x, mode=Mode.EVAL, rng=None, mask=None):
        x = as_tensor(x)
        if not _samples(mode):
            self._mode = mode
            return x * self.keep_prob
        if mask is None:
            mask = bernoulli(rng, x.shape, self.keep_prob)
        else:
            mask = as_tensor(mask)
            if mask.shape != x.shape:
                raise ShapeError(f"{self.name}: mask {mask.shape} does not match input {x.shape}")
        self._mode = mode
        self.last_mask = mask
        return x * mask

    def backward(self, grad):
        mode = _need(getattr(self, "_mode", None), self)
        if mode is Mode.EVAL:
            return grad * self.keep_prob
        return grad * self.last_mask

    def spec(self):
        return {**super().spec(), "keep_prob": self.keep_prob}


# ---------------------------------------------------------------- batch norm


class BatchNorm(Layer):
    """Per-channel batch normalisation for (B, C) or (B, C, H, W) inputs."""

    kind = "batchnorm"

    def __init__(self, num_features, momentum=0.1, eps=1e-5, name=""):
        super().__init__(name)
        if not 0.0 < momentum < 1.0:
            raise DomainError(f"momentum must be in (0, 1), got {momentum}")
        self.num_features = int(num_features)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.params = {
            "gamma": np.ones(self.num_features, dtype=DTYPE),
            "beta": np.zeros(self.num_features, dtype=DTYPE),
        }
        self.buffers = {
            "running_mean": np.zeros(self.num_features, dtype=DTYPE),
            "running_var": np.ones(self.num_features, dtype=DTYPE),
        }

    def _axes(self, x):
        if x.ndim not in (2, 4) or x.shape[1] != self.num_features:
            raise ShapeError(f"{self.name}: expected (batch, {self.num_features}[, H, W]), got {x.shape}")
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bcast(self, v, ndim):
        return v if ndim == 2 else v[None, :, None, None]

    def forward(self, x, mode=Mode.EVAL, rng=None):
        x = as_tensor(x)
        axes = self._axes(x)
        gamma = self._bcast(self.params["gamma"], x.ndim)
        beta = self._bcast(self.params["beta"], x.ndim)
        if mode is not Mode.TRAIN:
            mean = self._bcast(self.buffers["running_mean"], x.ndim)
            var = self._bcast(self.buffers["running_var"], x.ndim)
            return gamma * (x - mean) / np.sqrt(var + self.eps) + beta
        if x.shape[0] < 2:
            raise DomainError(f"{self.name}: batch norm needs batch >= 2 in TRAIN mode, got {x.shape[0]}")
        m = x.size // self.num_features
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = centered * inv_std
        mom = self.momentum
        self.buffers["running_mean"] = (1 - mom) * self.buffers["running_mean"] + mom * mean.reshape(-1)
        self.buffers["running_var"] = (1 - mom) * self.buffers["running_var"] + mom * var.reshape(-1) * (m / (m - 1))
        self._cache = (xhat, inv_std, axes, m)
        return gamma * xhat + beta

    def backward(self, grad):
        xhat, inv_std, axes, m = _need(getattr(self, "_cache", None), self)
        gamma = self._bcast(self.params["gamma"], grad.ndim)
        self.grads = {
            "gamma": (grad * xhat).sum(axis=axes),
            "beta": grad.sum(axis=axes),
        }
        dxhat = grad * gamma
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        return inv_std / m * (m * dxhat - s1 - xhat * s2)

    def spec(self):
        return {**super().spec(), "num_features": self.num_features, "momentum": self.momentum, "eps": self.eps}


# ---------------------------------------------------------------- dense


class Linear(Layer):
    """Affine map ``y = x W^T + b`` with W of shape (out, in)."""

    kind = "linear"

    def __init__(self, in_features, out_features, bias=True, name=""):
        super().__init__(name)
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.params = {"weight": np.zeros((self.out_features, self.in_features), dtype=DTYPE)}
        if bias:
            self.params["bias"] = np.zeros(self.out_features, dtype=DTYPE)

    @property
    def has_bias(self):
        return "bias" in self.params

    def forward(self, x, mode=Mode.EVAL, rng=None):
        x = as_tensor(x)
        _check_features(x, self.in_features, self)
        y = x @ self.params["weight"].T
        if self.has_bias:
            y = y + self.params["bias"]
        if mode is Mode.TRAIN:
            self._x = x
        return y

    def backward(self, grad):
        x = _need(getattr(self, "_x", None), self)
        self.grads = {"weight": grad.T @ x}
        if self.has_bias:
            self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"]

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"{self.name}: expects ({self.in_features},) input, got {tuple(in_shape)}")
        return (self.out_features,)

    def spec(self):
        return {**super().spec(), "in_features": self.in_features, "out_features": self.out_features, "bias": self.has_bias}


class SBLinear(Layer):
    """Dense layer factorised into N stochastically masked branches.

    ``branches`` has shape (N, out, in). In TRAIN mode each (example, output
    unit, branch) gets an independent Bernoulli(keep_probs[k]) mask that
    multiplies the branch's pre-activation before the branches are summed.
    In EVAL mode the branches are merged into ``sum_k p_k W_k`` and applied
    as one dense map. The bias is shared and never masked.
    """

    kind = "sb_linear"
    stochastic = True

    def __init__(self, branches, keep_probs, bias=None, name="", init="random_split"):
        super().__init__(name)
        branches = as_tensor(branches)
        if branches.ndim != 3:
            raise ShapeError(f"branches must be (N, out, in), got {branches.shape}")
        keep_probs = as_tensor(keep_probs).reshape(-1)
        if keep_probs.shape[0] != branches.shape[0] or keep_probs.shape[0] < 1:
            raise ShapeError(f"{keep_probs.shape[0]} keep probabilities for {branches.shape[0]} branches")
        if np.any(keep_probs <= 0.0) or np.any(keep_probs > 1.0):
            raise DomainError(f"keep probabilities must lie in (0, 1], got {keep_probs.tolist()}")
        self.params = {"branches": branches}
        if bias is not None:
            self.params["bias"] = as_tensor(bias).reshape(branches.shape[1])
        self.buffers = {"keep_probs": keep_probs}
        self.init = init
        self.last_masks = None

    @property
    def n_branches(self):
        return self.params["branches"].shape[0]

    @property
    def out_features(self):
        return self.params["branches"].shape[1]

    @property
    def in_features(self):
        return self.params["branches"].shape[2]

    @property
    def keep_probs(self):
        return self.buffers["keep_probs"]

    @property
    def has_bias(self):
        return "bias" in self.params

    def collapsed_weight(self) -> np.ndarray:
        return np.tensordot(self.keep_probs, self.params["branches"], axes=1)

    def sample_masks(self, rng, batch):
        return bernoulli(rng, (batch, self.out_features, self.n_branches), self.keep_probs)

    def _check_masks(self, masks, batch):
        masks = as_tensor(masks)
        want = (batch, self.out_features, self.n_branches)
        if masks.shape != want:
            raise ShapeError(f"{self.name}: masks must have shape {want}, got {masks.shape}")
        return masks

    def forward_train(self, x, rng=None, masks=None, cache=True):
        x = as_tensor(x)
        _check_features(x, self.in_features, self)
        n, out = self.n_branches, self.out_features
        masks = self.sample_masks(rng, x.shape[0]) if masks is None else self._check_masks(masks, x.shape[0])
        flat = self.params["branches"].reshape(n * out, self.in_features)
        # (batch, N, out): per-branch pre-activations
        per_branch = (x @ flat.T).reshape(x.shape[0], n, out)
        z = np.einsum("bko,bok->bo", per_branch, masks)
        if self.has_bias:
            z = z + self.params["bias"]
        self.last_masks = masks
        if cache:
            self._x = x
        return z

    def forward_eval(self, x):
        x = as_tensor(x)
        _check_features(x, self.in_features, self)
        z = x @ self.collapsed_weight().T
        if self.has_bias:
            z = z + self.params["bias"]
        return z

    def forward(self, x, mode=Mode.EVAL, rng=None, masks=None):
        if _samples(mode):
            return self.forward_train(x, rng, masks=masks, cache=mode is Mode.TRAIN)
        return self.forward_eval(x)

    def backward(self, grad):
        x = _need(getattr(self, "_x", None), self)
        masks = self.last_masks
        if masks.shape[0] != x.shape[0] or grad.shape != (x.shape[0], self.out_features):
            raise StateError(f"{self.name}: gradient {grad.shape} inconsistent with cached batch {x.shape}")
        n, out = self.n_branches, self.out_features
        # (batch, N, out) masked upstream gradient
        g = (grad[:, :, None] * masks).transpose(0, 2, 1).reshape(x.shape[0], n * out)
        flat = self.params["branches"].reshape(n * out, self.in_features)
        self.grads = {"branches": (g.T @ x).reshape(n, out, self.in_features)}
        if self.has_bias:
            self.grads["bias"] = grad.sum(axis=0)
        return g @ flat

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"{self.name}: expects ({self.in_features},) input, got {tuple(in_shape)}")
        return (self.out_features,)

    def spec(self):
        return {
            **super().spec(),
            "in_features": self.in_features,
            "out_features": self.out_features,
            "bias": self.has_bias,
            "n_branches": self.n_branches,
            "keep_probs": self.keep_probs.tolist(),
            "init": self.init,
        }


# ---------------------------------------------------------------- convolution


def conv_output_hw(h, w, kernel, stride, padding):
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"{h}x{w} input is too small for kernel {kernel}, stride {stride}, padding {padding}")
    return oh, ow


def im2col(x, kernel, stride=1, padding=0):
    """(B, C, H, W) -> (B*OH*OW, C*k*k) patch matrix, channel-major columns."""
    b, c, h, w = x.shape
    oh, ow = conv_output_hw(h, w, kernel, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kernel * kernel)


def col2im(cols, x_shape, kernel, stride=1, padding=0):
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to the image."""
    b, c, h, w = x_shape
    oh, ow = conv_output_hw(h, w, kernel, stride, padding)
    cols = cols.reshape(b, oh, ow, c, kernel, kernel).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    for i in range(kernel):
        for j in range(kernel):
            img[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return img[:, :, padding : padding + h, padding : padding + w]


class _ConvGeometry:
    def _geometry_init(self, in_channels, out_channels, kernel_size, stride, padding):
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.padding = int(padding)
        if self.stride < 1 or self.padding < 0 or self.kernel_size < 1:
            raise ShapeError("kernel_size and stride must be >= 1, padding >= 0")

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"{self.name}: expected (batch, {self.in_channels}, H, W), got {x.shape}")

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: expects {self.in_channels} channels, got {c}")
        return (self.out_channels, *conv_output_hw(h, w, self.kernel_size, self.stride, self.padding))

    def _geometry_spec(self):
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
        }


class Conv2d(_ConvGeometry, Layer):
    """2-D cross-correlation via im2col; weight is (C_out, C_in, k, k)."""

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=True, name=""):
        Layer.__init__(self, name)
        self._geometry_init(in_channels, out_channels, kernel_size, stride, padding)
        k = self.kernel_size
        self.params = {"weight": np.zeros((self.out_channels, self.in_channels, k, k), dtype=DTYPE)}
        if bias:
            self.params["bias"] = np.zeros(self.out_channels, dtype=DTYPE)

    @property
    def has_bias(self):
        return "bias" in self.params

    def forward(self, x, mode=Mode.EVAL, rng=None):
        x = as_tensor(x)
        self._check_input(x)
        b = x.shape[0]
        oh, ow = conv_output_hw(x.shape[2], x.shape[3], self.kernel_size, self.stride, self.padding)
        cols = im2col(x, self.kernel_size, self.stride, self.padding)
        y = cols @ self.params["weight"].reshape(self.out_channels, -1).T
        if self.has_bias:
            y = y + self.params["bias"]
        if mode is Mode.TRAIN:
            self._cache = (x.shape, cols)
        return y.reshape(b, oh, ow, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad):
        shape, cols = _need(getattr(self, "_cache", None), self)
        g = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        w = self.params["weight"]
        self.grads = {"weight": (g.T @ cols).reshape(w.shape)}
        if self.has_bias:
            self.grads["bias"] = g.sum(axis=0)
        dcols = g @ w.reshape(self.out_channels, -1)
        return col2im(dcols, shape, self.kernel_size, self.stride, self.padding)

    def spec(self):
        return {**Layer.spec(self), **self._geometry_spec(), "bias": self.has_bias}


class SBConv2d(_ConvGeometry, Layer):
    """Convolution factorised into N masked kernel branches.

    One mask per (example, output channel, branch) scales that branch's whole
    response map for the channel.
    """

    kind = "sb_conv2d"
    stochastic = True

    def __init__(self, branches, keep_probs, bias=None, stride=1, padding=0, name="", init="random_split"):
        Layer.__init__(self, name)
        branches = as_tensor(branches)
        if branches.ndim != 5 or branches.shape[3] != branches.shape[4]:
            raise ShapeError(f"branches must be (N, C_out, C_in, k, k), got {branches.shape}")
        n, c_out, c_in, k, _ = branches.shape
        self._geometry_init(c_in, c_out, k, stride, padding)
        keep_probs = as_tensor(keep_probs).reshape(-1)
        if keep_probs.shape[0] != n:
            raise ShapeError(f"{keep_probs.shape[0]} keep probabilities for {n} branches")
        if np.any(keep_probs <= 0.0) or np.any(keep_probs > 1.0):
            raise DomainError(f"keep probabilities must lie in (0, 1], got {keep_probs.tolist()}")
        self.params = {"branches": branches}
        if bias is not None:
            self.params["bias"] = as_tensor(bias).reshape(c_out)
        self.buffers = {"keep_probs": keep_probs}
        self.init = init
        self.last_masks = None

    @property
    def n_branches(self):
        return self.params["branches"].shape[0]

    @property
    def keep_probs(self):
        return self.buffers["keep_probs"]

    @property
    def has_bias(self):
        return "bias" in self.params

    def collapsed_weight(self) -> np.ndarray:
        return np.tensordot(self.keep_probs, self.params["branches"], axes=1)

    def sample_masks(self, rng, batch):
        return bernoulli(rng, (batch, self.out_channels, self.n_branches), self.keep_probs)

    def forward_train(self, x, rng=None, masks=None, cache=True):
        x = as_tensor(x)
        self._check_input(x)
        b = x.shape[0]
        n, c_out = self.n_branches, self.out_channels
        if masks is None:
            masks = self.sample_masks(rng, b)
        else:
            masks = as_tensor(masks)
            if masks.shape != (b, c_out, n):
                raise ShapeError(f"{self.name}: masks must have shape {(b, c_out, n)}, got {masks.shape}")
        oh, ow = conv_output_hw(x.shape[2], x.shape[3], self.kernel_size, self.stride, self.padding)
        cols = im2col(x, self.kernel_size, self.stride, self.padding)
        flat = self.params["branches"].reshape(n * c_out, -1)
        per_branch = (cols @ flat.T).reshape(b, oh * ow, n, c_out)
        mk = masks.transpose(0, 2, 1)[:, None, :, :]
        z = (per_branch * mk).sum(axis=2)
        if self.has_bias:
            z = z + self.params["bias"]
        self.last_masks = masks
        if cache:
            self._cache = (x.shape, cols, oh * ow)
        return z.reshape(b, oh, ow, c_out).transpose(0, 3, 1, 2)

    def forward_eval(self, x):
        x = as_tensor(x)
        self._check_input(x)
        b = x.shape[0]
        oh, ow = conv_output_hw(x.shape[2], x.shape[3], self.kernel_size, self.stride, self.padding)
        cols = im2col(x, self.kernel_size, self.stride, self.padding)
        y = cols @ self.collapsed_weight().reshape(self.out_channels, -1).T
        if self.has_bias:
            y = y + self.params["bias"]
        return y.reshape(b, oh, ow, self.out_channels).transpose(0, 3, 1, 2)

    def forward(self, x, mode=Mode.EVAL, rng=None, masks=None):
        if _samples(mode):
            return self.forward_train(x, rng, masks=masks, cache=mode is Mode.TRAIN)
        return self.forward_eval(x)

    def backward(self, grad):
        shape, cols, hw = _need(getattr(self, "_cache", None), self)
        b = shape[0]
        n, c_out = self.n_branches, self.out_channels
        g = grad.transpose(0, 2, 3, 1).reshape(b, hw, 1, c_out)
        mk = self.last_masks.transpose(0, 2, 1)[:, None, :, :]
        gb = (g * mk).reshape(b * hw, n * c_out)
        br = self.params["branches"]
        flat = br.reshape(n * c_out, -1)
        self.grads = {"branches": (gb.T @ cols).reshape(br.shape)}
        if self.has_bias:
            self.grads["bias"] = grad.sum(axis=(0, 2, 3))
        return col2im(gb @ flat, shape, self.kernel_size, self.stride, self.padding)

    def spec(self):
        return {
            **Layer.spec(self),
            **self._geometry_spec(),
            "bias": self.has_bias,
            "n_branches": self.n_branches,
            "keep_probs": self.keep_probs.tolist(),
            "init": self.init,
        }


def check_uniform_keep(keep_probs) -> float:
    p = np.asarray(keep_probs, dtype=DTYPE)
    if not np.all(p == p[0]):
        raise ConstraintError(f"group masking needs equal keep probabilities, got {p.tolist()}")
    return float(p[0])
