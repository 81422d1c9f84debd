"""Reverse-mode automatic differentiation on float64 numpy arrays.

Small tape-based engine sized for this pipeline: 4-axis grids shaped
(batch, channels, height, width), 3x3/1x1 same-padding convolutions,
per-channel batch normalization, dense layers, channel concatenation,
and a masked mean-absolute-error loss.

Every op builds a `Tensor` node holding the forward value and a closure
that scatters the upstream gradient into its parents' accumulators.
`Tensor.backward()` walks the graph in reverse topological order.  All
arithmetic is 64-bit, and every reduction is a plain numpy reduction with
a fixed evaluation order, so repeated runs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class EngineError(ValueError):
    """Misuse of the engine (bad mode, empty mask, non-scalar backward)."""


class ShapeError(EngineError):
    """Operand shapes are incompatible."""


class DivergenceError(RuntimeError):
    """A gradient or loss became non-finite."""


class Tensor:
    """An array node in the autodiff graph with a gradient accumulator."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __add__(self, other: "Tensor") -> "Tensor":
        if self.data.shape != other.data.shape:
            raise ShapeError(f"add: {self.data.shape} vs {other.data.shape}")
        out = Tensor(self.data + other.data, parents=(self, other))

        def backward():
            self.grad += out.grad
            other.grad += out.grad

        out._backward = backward
        return out

    def reshape(self, *shape) -> "Tensor":
        out = Tensor(self.data.reshape(*shape), parents=(self,))

        def backward():
            self.grad += out.grad.reshape(self.data.shape)

        out._backward = backward
        return out

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable node's .grad."""
        if self.data.size != 1:
            raise EngineError("backward() requires a scalar output")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Layers


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), parents=(x,))

    def backward():
        x.grad += out.grad * (out.data > 0.0)

    out._backward = backward
    return out


def _apply_activation(out: Tensor, activation: str) -> Tensor:
    if activation == "linear":
        return out
    if activation == "relu":
        return relu(out)
    raise EngineError(f"unknown activation {activation!r}")


def conv2d(
    x: Tensor,
    weights: Tensor,
    bias: Tensor,
    stride: int = 1,
    padding: str = "same",
    activation: str = "linear",
) -> Tensor:
    """Same-padding 2-D convolution over (B, C, H, W) with square odd kernels.

    Output spatial size equals input size.  Gradients are exact w.r.t. the
    input, the kernel, and the bias.
    """
    if stride != 1 or padding != "same":
        raise EngineError("only stride=1 same-padding convolutions are supported")
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-axis, got shape {x.data.shape}")
    batch, c_in, height, width = x.data.shape
    c_out, c_in_w, kh, kw = weights.data.shape
    if c_in != c_in_w:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.data.shape} vs kernel {weights.data.shape}"
        )
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {kh}x{kw}")

    pad = kh // 2
    xpad = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # im2col: one GEMM per conv instead of one per kernel offset.  The cols
    # buffer lives in the backward closure for the graph's lifetime; at the
    # grid sizes this engine targets that is a few MB per layer.
    windows = np.lib.stride_tricks.sliding_window_view(xpad, (kh, kw), axis=(2, 3))
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(batch, c_in * kh * kw, height * width)
    w2d = weights.data.reshape(c_out, c_in * kh * kw)
    out_flat = np.matmul(w2d, cols)  # (B, C_out, H*W)
    out = Tensor(
        out_flat.reshape(batch, c_out, height, width) + bias.data[None, :, None, None],
        parents=(x, weights, bias),
    )

    def backward():
        g2 = out.grad.reshape(batch, c_out, height * width)
        bias.grad += out.grad.sum(axis=(0, 2, 3))
        weights.grad += (
            np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weights.data.shape)
        )
        dcols = np.matmul(w2d.T, g2).reshape(batch, c_in, kh, kw, height, width)
        dxpad = np.zeros_like(xpad)
        for di in range(kh):
            for dj in range(kw):
                dxpad[:, :, di : di + height, dj : dj + width] += dcols[:, :, di, dj]
        x.grad += dxpad[:, :, pad : pad + height, pad : pad + width]

    out._backward = backward
    return _apply_activation(out, activation)


def dense(x: Tensor, weights: Tensor, bias: Tensor, activation: str = "linear") -> Tensor:
    """y = x @ W.T + b for x shaped (B, in_dim), W shaped (out_dim, in_dim)."""
    if x.data.ndim != 2:
        raise ShapeError(f"dense input must be 2-axis, got shape {x.data.shape}")
    if x.data.shape[1] != weights.data.shape[1]:
        raise ShapeError(
            f"dense dimension mismatch: input {x.data.shape} vs weights {weights.data.shape}"
        )
    out = Tensor(x.data @ weights.data.T + bias.data, parents=(x, weights, bias))

    def backward():
        g = out.grad
        weights.grad += g.T @ x.data
        bias.grad += g.sum(axis=0)
        x.grad += g @ weights.data

    out._backward = backward
    return _apply_activation(out, activation)


@dataclass
class BatchNormState:
    """Per-channel batch normalization parameters and running statistics.

    `gamma`/`beta` are trainable; the running mean/variance are inference
    statistics updated by exponential moving average during training.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-5
    mode: str = "train"  # "train" | "infer"

    @classmethod
    def create(cls, channels: int, momentum: float = 0.99, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels)),
            beta=Tensor(np.zeros(channels)),
            running_mean=np.zeros(channels),
            running_var=np.zeros(channels),
            momentum=momentum,
            eps=eps,
        )


def batch_norm(x: Tensor, state: BatchNormState) -> Tensor:
    """Normalize per channel over (batch, H, W).

    Train mode uses batch statistics (biased variance, the same statistic
    stored in the running average); infer mode uses the running statistics
    and is a pure function of its input.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm input must be 4-axis, got shape {x.data.shape}")
    channels = x.data.shape[1]
    if channels != state.gamma.data.shape[0]:
        raise ShapeError(
            f"batch_norm channel mismatch: input has {channels}, state has "
            f"{state.gamma.data.shape[0]}"
        )
    gamma, beta = state.gamma, state.beta

    if state.mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
        state.running_mean = state.momentum * state.running_mean + (1.0 - state.momentum) * mu
        state.running_var = state.momentum * state.running_var + (1.0 - state.momentum) * var
    elif state.mode == "infer":
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv[None, :, None, None]
    else:
        raise EngineError(f"unknown batch_norm mode {state.mode!r}")

    out = Tensor(
        gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None],
        parents=(x, gamma, beta),
    )
    train = state.mode == "train"

    def backward():
        g = out.grad
        gamma.grad += (g * xhat).sum(axis=(0, 2, 3))
        beta.grad += g.sum(axis=(0, 2, 3))
        g_xhat = g * gamma.data[None, :, None, None]
        if train:
            n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            sum_g = g_xhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_gx = (g_xhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            x.grad += (
                inv[None, :, None, None] / n * (n * g_xhat - sum_g - xhat * sum_gx)
            )
        else:
            x.grad += g_xhat * inv[None, :, None, None]

    out._backward = backward
    return out


def concat_channels(xs: list[Tensor]) -> Tensor:
    """Concatenate along the channel axis, in argument order."""
    if not xs:
        raise EngineError("concat_channels needs at least one input")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].data.shape
    for t in xs[1:]:
        s = t.data.shape
        if s[0] != ref[0] or s[2:] != ref[2:]:
            raise ShapeError(f"concat_channels spatial mismatch: {ref} vs {s}")
    out = Tensor(np.concatenate([t.data for t in xs], axis=1), parents=tuple(xs))
    sizes = [t.data.shape[1] for t in xs]

    def backward():
        offset = 0
        for t, size in zip(xs, sizes):
            t.grad += out.grad[:, offset : offset + size]
            offset += size

    out._backward = backward
    return out


def masked_mae(pred: Tensor, target, mask: np.ndarray) -> Tensor:
    """Mean absolute error over the masked cells only.

    loss = sum_b sum_{cell in mask} |pred - target| / (B * |mask|).
    The gradient w.r.t. pred is sign(pred - target) / (B * |mask|) on mask
    cells, exactly 0 elsewhere, and 0 where pred equals target.
    """
    mask = np.asarray(mask, dtype=bool)
    n_mask = int(mask.sum())
    if n_mask == 0:
        raise EngineError("masked_mae: empty mask")
    target_t = target if isinstance(target, Tensor) else None
    tdata = target.data if target_t is not None else np.asarray(target, dtype=np.float64)
    if pred.data.shape != tdata.shape:
        raise ShapeError(f"masked_mae: pred {pred.data.shape} vs target {tdata.shape}")

    batch = pred.data.shape[0]
    denom = batch * n_mask
    diff = pred.data - tdata
    m = mask[None, None, :, :]
    out = Tensor(
        np.abs(diff * m).sum() / denom,
        parents=(pred,) if target_t is None else (pred, target_t),
    )

    def backward():
        g = out.grad * np.sign(diff) * m / denom
        pred.grad += g
        if target_t is not None:
            target_t.grad -= g

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Parameters and optimizer


class ParamSet:
    """Ordered store of uniquely named trainable tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise EngineError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def n_scalars(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            p.data[...] = snap[name]


@dataclass
class AdamState:
    """Adam optimizer state: step counter plus per-parameter moments."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamSet, state: AdamState) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"divergence: non-finite gradient in {name!r}")
        m = state.first_moment.setdefault(name, np.zeros_like(p.data))
        v = state.second_moment.setdefault(name, np.zeros_like(p.data))
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        p.grad[...] = 0.0


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(f, params: list[Tensor], eps: float = 1e-6, kink_tol: float | None = None) -> float:
    """Max relative error between reverse-mode and central finite differences.

    `f` is a zero-argument callable returning a scalar Tensor; it must be
    re-evaluable (it is called twice per coordinate).  The error at each
    coordinate is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).

    With `kink_tol` set, coordinates whose finite-difference probe straddles
    a non-smooth point (relu or absolute-value corner) are skipped: for a
    piecewise-linear function the one-sided slope mismatch
    |f(x+h) - 2 f(x) + f(x-h)| / h equals exactly twice the central-difference
    error, so coordinates where that estimate exceeds `kink_tol` (relative to
    the gradient scale) carry no information about the analytic gradient.
    """
    for p in params:
        p.zero_grad()
    out = f()
    out.backward()
    analytic = [p.grad.copy() for p in params]
    f0 = out.data.item()

    max_err = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().data.item()
            flat[i] = orig - eps
            fm = f().data.item()
            flat[i] = orig
            g_fd = (fp - fm) / (2.0 * eps)
            g_ad = gflat[i]
            scale = max(1.0, abs(g_ad), abs(g_fd))
            if kink_tol is not None:
                kink_err = abs(fp - 2.0 * f0 + fm) / (2.0 * eps)
                if kink_err > kink_tol * scale:
                    continue
            max_err = max(max_err, abs(g_ad - g_fd) / scale)
    return max_err
