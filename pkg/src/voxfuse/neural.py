"""Minimal neural toolkit with hand-derived gradients.

Layers follow a forward/backward protocol: ``forward`` caches what the
backward pass needs, ``backward`` returns the input gradient and
accumulates parameter gradients in place. The network topology is fixed
and hand-wired; there is no general autodiff. Training runs in float32;
float64 exists for finite-difference gradient checks.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import BatchTooSmall, EmptyVoxelRow, ShapeMismatch

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


class Param:
    """A trainable array with its gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, value, name=""):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad[...] = 0.0


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Linear:
    """y = x @ W.T (+ b) for row-major batches.

    The bias is dropped when a batch-norm layer follows: BN re-centers
    per feature, which makes a preceding bias both redundant and
    unidentifiable (its true gradient is exactly zero).
    """

    def __init__(self, in_dim, out_dim, rng, dtype=np.float32, with_bias=True):
        self.W = Param(glorot_uniform(rng, (out_dim, in_dim), in_dim, out_dim, dtype), "W")
        self.b = Param(np.zeros(out_dim, dtype=dtype), "b") if with_bias else None
        self._x = None

    def forward(self, x):
        if x.shape[-1] != self.W.value.shape[1]:
            raise ShapeMismatch(
                f"linear input dim {x.shape[-1]} != {self.W.value.shape[1]}")
        self._x = x
        y = x @ self.W.value.T
        return y + self.b.value if self.b is not None else y

    def backward(self, dy):
        self.W.grad += dy.T @ self._x
        if self.b is not None:
            self.b.grad += dy.sum(axis=0)
        return dy @ self.W.value

    def params(self):
        return [self.W] if self.b is None else [self.W, self.b]


class BatchNorm:
    """Per-feature batch normalization with running statistics.

    Train mode normalizes with biased batch statistics and needs at
    least 2 rows; eval mode uses the running estimates.
    """

    def __init__(self, dim, rng=None, dtype=np.float32,
                 eps=BN_EPS, momentum=BN_MOMENTUM):
        self.gamma = Param(np.ones(dim, dtype=dtype), "gamma")
        self.beta = Param(np.zeros(dim, dtype=dtype), "beta")
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.eps = eps
        self.momentum = momentum
        self._cache = None

    def forward(self, x, train):
        if train:
            if x.shape[0] < 2:
                raise BatchTooSmall(
                    f"batch statistics need >= 2 rows, got {x.shape[0]}")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            x_hat = (x - mean) * inv_std
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(x.dtype)
            self.running_var = (m * self.running_var + (1 - m) * var).astype(x.dtype)
            self._cache = ("train", x_hat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            x_hat = (x - self.running_mean) * inv_std
            self._cache = ("eval", None, inv_std)
        return self.gamma.value * x_hat + self.beta.value

    def backward(self, dy):
        mode, x_hat, inv_std = self._cache
        if mode == "eval":
            return dy * self.gamma.value * inv_std
        n = dy.shape[0]
        self.gamma.grad += (dy * x_hat).sum(axis=0)
        self.beta.grad += dy.sum(axis=0)
        dx_hat = dy * self.gamma.value
        # dx folds the mean and variance paths of the batch statistics
        return (inv_std / n) * (n * dx_hat - dx_hat.sum(axis=0)
                                - x_hat * (dx_hat * x_hat).sum(axis=0))

    def params(self):
        return [self.gamma, self.beta]


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class FcnLayer:
    """Linear + batch norm + ReLU over (N, features) rows."""

    def __init__(self, in_dim, out_dim, rng, dtype=np.float32):
        self.linear = Linear(in_dim, out_dim, rng, dtype, with_bias=False)
        self.bn = BatchNorm(out_dim, dtype=dtype)
        self.relu = ReLU()

    def forward(self, x, train):
        return self.relu.forward(self.bn.forward(self.linear.forward(x), train))

    def backward(self, dy):
        return self.linear.backward(self.bn.backward(self.relu.backward(dy)))

    def params(self):
        return self.linear.params() + self.bn.params()


class VfeLayer:
    """Pointwise FCN, per-voxel element-wise max, and broadcast-concat.

    Input is a padded (K, T, in) block with a (K, T) validity mask.
    Returns the (K, T, 2 * out_half) concatenated point features (masked
    slots zeroed) and the (K, out_half) voxel summary. Max-pool gradient
    routes to the lowest-index maximal slot.
    """

    def __init__(self, in_dim, out_half, rng, dtype=np.float32):
        self.fcn = FcnLayer(in_dim, out_half, rng, dtype)
        self.out_half = out_half
        self._cache = None

    def forward(self, points, mask, train):
        K, T, _ = points.shape
        if not mask.any(axis=1).all():
            raise EmptyVoxelRow("every voxel row needs >= 1 unmasked slot")
        flat = self.fcn.forward(points[mask], train)
        feats = np.zeros((K, T, self.out_half), dtype=flat.dtype)
        feats[mask] = flat
        guarded = np.where(mask[:, :, None], feats, -np.inf)
        argmax = np.argmax(guarded, axis=1)           # (K, out_half)
        summary = np.take_along_axis(feats, argmax[:, None, :], axis=1)[:, 0, :]
        pointwise = np.concatenate(
            [feats, np.broadcast_to(summary[:, None, :], feats.shape)], axis=2)
        pointwise = pointwise * mask[:, :, None]
        self._cache = (mask, argmax, K, T)
        return pointwise, summary

    def backward(self, d_pointwise=None, d_summary=None):
        mask, argmax, K, T = self._cache
        if d_pointwise is not None:
            d_pointwise = d_pointwise * mask[:, :, None]
            d_feat = d_pointwise[:, :, :self.out_half].copy()
            d_total = d_pointwise[:, :, self.out_half:].sum(axis=1)
        else:
            d_feat = np.zeros((K, T, self.out_half))
            d_total = np.zeros((K, self.out_half))
        if d_summary is not None:
            d_total = d_total + d_summary
        rows = np.arange(K)[:, None]
        cols = np.arange(self.out_half)[None, :]
        # one target slot per (voxel, channel), so plain indexing is safe
        d_feat[rows, argmax, cols] += d_total
        d_flat = self.fcn.backward(d_feat[mask])
        d_points = np.zeros((K, T, d_flat.shape[-1]), dtype=d_flat.dtype)
        d_points[mask] = d_flat
        return d_points

    def params(self):
        return self.fcn.params()


def _to_tuple(v, n):
    return tuple(v) if isinstance(v, (tuple, list)) else (v,) * n


class _ChannelNorm:
    """BN + ReLU applied per channel of an (N, C, *spatial) tensor."""

    def __init__(self, channels, dtype, with_bn, with_relu):
        self.bn = BatchNorm(channels, dtype=dtype) if with_bn else None
        self.relu = ReLU() if with_relu else None
        self._shape = None

    def forward(self, y, train):
        if self.bn is not None:
            self._shape = y.shape
            flat = np.moveaxis(y, 1, -1).reshape(-1, y.shape[1])
            flat = self.bn.forward(flat, train)
            y = np.moveaxis(flat.reshape(
                self._shape[0], *self._shape[2:], self._shape[1]), -1, 1)
        if self.relu is not None:
            y = self.relu.forward(y)
        return y

    def backward(self, dy):
        if self.relu is not None:
            dy = self.relu.backward(dy)
        if self.bn is not None:
            flat = np.moveaxis(dy, 1, -1).reshape(-1, dy.shape[1])
            flat = self.bn.backward(flat)
            dy = np.moveaxis(flat.reshape(
                self._shape[0], *self._shape[2:], self._shape[1]), -1, 1)
        return dy

    def params(self):
        return self.bn.params() if self.bn is not None else []


class Conv2d:
    """Cross-correlation over (N, C, H, W), optionally followed by BN+ReLU."""

    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, pad=0,
                 with_bn=True, with_relu=True, dtype=np.float32):
        kh, kw = _to_tuple(kernel, 2)
        fan = in_ch * kh * kw, out_ch * kh * kw
        self.kernels = Param(glorot_uniform(rng, (out_ch, in_ch, kh, kw), *fan, dtype), "K")
        # bias only without BN; BN's beta otherwise plays that role
        self.bias = None if with_bn else Param(np.zeros(out_ch, dtype=dtype), "b")
        self.stride = _to_tuple(stride, 2)
        self.pad = _to_tuple(pad, 2)
        self.norm = _ChannelNorm(out_ch, dtype, with_bn, with_relu)
        self._cache = None

    def out_shape(self, in_shape):
        k = self.kernels.value.shape[2:]
        return tuple((s + 2 * p - kk) // st + 1 for s, p, kk, st in
                     zip(in_shape, self.pad, k, self.stride))

    def forward(self, x, train):
        n, c, h, w = x.shape
        out_ch, in_ch, kh, kw = self.kernels.value.shape
        if c != in_ch:
            raise ShapeMismatch(f"conv input channels {c} != {in_ch}")
        ph, pw = self.pad
        sh, sw = self.stride
        ho, wo = self.out_shape((h, w))
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"conv output {ho}x{wo} is empty")
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, ::sh, ::sw]                      # (N, C, Ho, Wo, kh, kw)
        # channel-major cols keep the fold slices contiguous in backward
        cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)
                                    ).reshape(in_ch * kh * kw, n * ho * wo)
        y = self.kernels.value.reshape(out_ch, -1) @ cols
        if self.bias is not None:
            y = y + self.bias.value[:, None]
        y = y.reshape(out_ch, n, ho, wo).transpose(1, 0, 2, 3)
        self._cache = (cols, x.shape, (ho, wo))
        return self.norm.forward(y, train)

    def backward(self, dy):
        dy = self.norm.backward(dy)
        cols, x_shape, (ho, wo) = self._cache
        n, c, h, w = x_shape
        out_ch, in_ch, kh, kw = self.kernels.value.shape
        ph, pw = self.pad
        sh, sw = self.stride
        dy_mat = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(out_ch, -1)
        self.kernels.grad += (dy_mat @ cols.T).reshape(self.kernels.value.shape)
        if self.bias is not None:
            self.bias.grad += dy_mat.sum(axis=1)
        dcols = (self.kernels.value.reshape(out_ch, -1).T @ dy_mat).reshape(
            in_ch, kh, kw, n, ho, wo)
        dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=dy.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + ho * sh:sh, j:j + wo * sw:sw] += \
                    dcols[:, i, j].swapaxes(0, 1)
        return dxp[:, :, ph:ph + h, pw:pw + w]

    def params(self):
        own = [self.kernels] if self.bias is None else [self.kernels, self.bias]
        return own + self.norm.params()


class Conv3d:
    """Cross-correlation over (N, C, D, H, W) with BN+ReLU."""

    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, pad=0,
                 with_bn=True, with_relu=True, dtype=np.float32):
        kd, kh, kw = _to_tuple(kernel, 3)
        fan = in_ch * kd * kh * kw, out_ch * kd * kh * kw
        self.kernels = Param(
            glorot_uniform(rng, (out_ch, in_ch, kd, kh, kw), *fan, dtype), "K")
        self.bias = None if with_bn else Param(np.zeros(out_ch, dtype=dtype), "b")
        self.stride = _to_tuple(stride, 3)
        self.pad = _to_tuple(pad, 3)
        self.norm = _ChannelNorm(out_ch, dtype, with_bn, with_relu)
        self._cache = None

    def out_shape(self, in_shape):
        k = self.kernels.value.shape[2:]
        return tuple((s + 2 * p - kk) // st + 1 for s, p, kk, st in
                     zip(in_shape, self.pad, k, self.stride))

    def forward(self, x, train):
        n, c, d, h, w = x.shape
        out_ch, in_ch, kd, kh, kw = self.kernels.value.shape
        if c != in_ch:
            raise ShapeMismatch(f"conv3d input channels {c} != {in_ch}")
        pd, ph, pw = self.pad
        sd, sh, sw = self.stride
        do, ho, wo = self.out_shape((d, h, w))
        if min(do, ho, wo) < 1:
            raise ShapeMismatch(f"conv3d output {do}x{ho}x{wo} is empty")
        xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
        win = np.lib.stride_tricks.sliding_window_view(
            xp, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
        cols = np.ascontiguousarray(win.transpose(1, 5, 6, 7, 0, 2, 3, 4)
                                    ).reshape(in_ch * kd * kh * kw,
                                              n * do * ho * wo)
        y = self.kernels.value.reshape(out_ch, -1) @ cols
        if self.bias is not None:
            y = y + self.bias.value[:, None]
        y = y.reshape(out_ch, n, do, ho, wo).transpose(1, 0, 2, 3, 4)
        self._cache = (cols, x.shape, (do, ho, wo))
        return self.norm.forward(y, train)

    def backward(self, dy):
        dy = self.norm.backward(dy)
        cols, x_shape, (do, ho, wo) = self._cache
        n, c, d, h, w = x_shape
        out_ch, in_ch, kd, kh, kw = self.kernels.value.shape
        pd, ph, pw = self.pad
        sd, sh, sw = self.stride
        dy_mat = np.ascontiguousarray(dy.transpose(1, 0, 2, 3, 4)).reshape(out_ch, -1)
        self.kernels.grad += (dy_mat @ cols.T).reshape(self.kernels.value.shape)
        if self.bias is not None:
            self.bias.grad += dy_mat.sum(axis=1)
        dcols = (self.kernels.value.reshape(out_ch, -1).T @ dy_mat).reshape(
            in_ch, kd, kh, kw, n, do, ho, wo)
        dxp = np.zeros((n, c, d + 2 * pd, h + 2 * ph, w + 2 * pw), dtype=dy.dtype)
        for a in range(kd):
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, a:a + do * sd:sd, i:i + ho * sh:sh, j:j + wo * sw:sw] \
                        += dcols[:, a, i, j].swapaxes(0, 1)
        return dxp[:, :, pd:pd + d, ph:ph + h, pw:pw + w]

    def params(self):
        own = [self.kernels] if self.bias is None else [self.kernels, self.bias]
        return own + self.norm.params()


class Deconv2d:
    """Transposed 2D convolution (upsampling), output (in-1)*s - 2p + k."""

    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, pad=0,
                 with_bn=True, with_relu=True, dtype=np.float32):
        kh, kw = _to_tuple(kernel, 2)
        fan = in_ch * kh * kw, out_ch * kh * kw
        self.kernels = Param(glorot_uniform(rng, (in_ch, out_ch, kh, kw), *fan, dtype), "K")
        self.bias = None if with_bn else Param(np.zeros(out_ch, dtype=dtype), "b")
        self.stride = _to_tuple(stride, 2)
        self.pad = _to_tuple(pad, 2)
        self.norm = _ChannelNorm(out_ch, dtype, with_bn, with_relu)
        self._cache = None

    def out_shape(self, in_shape):
        k = self.kernels.value.shape[2:]
        return tuple((s - 1) * st - 2 * p + kk for s, p, kk, st in
                     zip(in_shape, self.pad, k, self.stride))

    def forward(self, x, train):
        n, c, h, w = x.shape
        in_ch, out_ch, kh, kw = self.kernels.value.shape
        if c != in_ch:
            raise ShapeMismatch(f"deconv input channels {c} != {in_ch}")
        ph, pw = self.pad
        sh, sw = self.stride
        ho, wo = self.out_shape((h, w))
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"deconv output {ho}x{wo} is empty")
        x_mat = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(in_ch, -1)
        spread = (self.kernels.value.reshape(in_ch, -1).T @ x_mat).reshape(
            out_ch, kh, kw, n, h, w)
        yp = np.zeros((n, out_ch, ho + 2 * ph, wo + 2 * pw), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                yp[:, :, i:i + h * sh:sh, j:j + w * sw:sw] += \
                    spread[:, i, j].swapaxes(0, 1)
        y = yp[:, :, ph:ph + ho, pw:pw + wo]
        if self.bias is not None:
            y = y + self.bias.value[None, :, None, None]
        self._cache = (x_mat, x.shape, (ho, wo))
        return self.norm.forward(y, train)

    def backward(self, dy):
        dy = self.norm.backward(dy)
        x_mat, x_shape, (ho, wo) = self._cache
        n, c, h, w = x_shape
        in_ch, out_ch, kh, kw = self.kernels.value.shape
        ph, pw = self.pad
        sh, sw = self.stride
        if self.bias is not None:
            self.bias.grad += dy.sum(axis=(0, 2, 3))
        dyp = np.pad(dy, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        win = np.lib.stride_tricks.sliding_window_view(
            dyp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)
                                    ).reshape(out_ch * kh * kw, n * h * w)
        self.kernels.grad += (x_mat @ cols.T).reshape(self.kernels.value.shape)
        dx = (self.kernels.value.reshape(in_ch, -1) @ cols).reshape(
            in_ch, n, h, w).transpose(1, 0, 2, 3)
        return dx

    def params(self):
        own = [self.kernels] if self.bias is None else [self.kernels, self.bias]
        return own + self.norm.params()


class SGD:
    """Stochastic gradient descent with momentum: v = mu*v + g; p -= lr*v."""

    def __init__(self, lr, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocity = {}

    def step(self, params):
        for p in params:
            if p.grad.shape != p.value.shape:
                raise ShapeMismatch(f"{p.name}: grad shape {p.grad.shape} "
                                    f"!= value shape {p.value.shape}")
            v = self._velocity.get(id(p))
            if v is None:
                v = np.zeros_like(p.value)
                self._velocity[id(p)] = v
            v *= self.momentum
            v += p.grad
            p.value -= self.lr * v


def sgd_step(state: SGD, params):
    """Functional alias for one optimizer step over ``params``."""
    state.step(params)


def gradient_check(f, params, h=1e-5, coords_per_param=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f()`` must run a deterministic forward+backward in double precision,
    return the scalar loss, and leave gradients in ``param.grad``. When
    ``coords_per_param`` is set, at most that many coordinates per
    parameter are probed (required for anything beyond tiny layers).
    Relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    f()
    analytic = [p.grad.copy() for p in params]
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        n = flat.size
        if coords_per_param is None or n <= coords_per_param:
            coords = range(n)
        else:
            coords = rng.choice(n, size=coords_per_param, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            lp = f()
            flat[c] = orig - h
            lm = f()
            flat[c] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = grad.reshape(-1)[c]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst


def zero_grads(params):
    for p in params:
        p.zero_grad()


def name_params(params, prefix):
    for p in params:
        p.name = f"{prefix}.{p.name}" if p.name else prefix
    return params


def save_checkpoint(directory, params):
    """One NPY per parameter plus a manifest of name, file, and shape."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, p in enumerate(params):
        fname = f"p{i:04d}.npy"
        np.save(directory / fname, p.value)
        shape = "x".join(str(s) for s in p.value.shape)
        lines.append(f"{p.name}\t{fname}\t{shape}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory, params):
    directory = Path(directory)
    entries = {}
    for line in (directory / "manifest.txt").read_text().splitlines():
        name, fname, shape = line.split("\t")
        entries[name] = (fname, tuple(int(s) for s in shape.split("x")))
    for p in params:
        if p.name not in entries:
            raise KeyError(f"checkpoint missing parameter {p.name!r}")
        fname, shape = entries[p.name]
        value = np.load(directory / fname)
        if tuple(value.shape) != tuple(p.value.shape):
            raise ShapeMismatch(
                f"{p.name}: checkpoint shape {value.shape} != {p.value.shape}")
        p.value[...] = value.astype(p.value.dtype)
