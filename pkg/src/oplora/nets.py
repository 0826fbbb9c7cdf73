"""Minimal differentiable models exercising the optimizers.

A :class:`LoraLinear` is a frozen base weight plus a rank-r adapter;
its forward/backward passes capture the batch input X and the output
gradient S so optimizers can form the full gradient S^T X as a thin
pair.  The linear factorization task and a small synthetic MLP task
drive the benchmark; everything is manual forward/backward, no general
autodiff.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeError, StaleCaptureError
from .lowrank import FactorPair, truncated_svd
from .matcore import as_matrix, matmul, sample_columns


@dataclass
class LoraLinear:
    """Frozen base weight + adapter, with X/S capture hooks.

    ``w0`` may be None for adapter-only objectives (the linear
    factorization task); it is never mutated by any optimizer.
    """

    w0: Optional[np.ndarray]
    adapter: FactorPair
    captured_x: Optional[np.ndarray] = None
    captured_s: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.w0 is not None:
            self.w0 = as_matrix(self.w0, "w0")
            if self.w0.shape != (self.adapter.d_out, self.adapter.d_in):
                raise ShapeError(
                    f"base weight {self.w0.shape} does not match adapter "
                    f"({self.adapter.d_out}, {self.adapter.d_in})")

    @property
    def d_out(self) -> int:
        return self.adapter.d_out

    @property
    def d_in(self) -> int:
        return self.adapter.d_in

    def forward(self, x) -> np.ndarray:
        """``x @ (w0 + u v^T)^T`` with the adapter applied thin."""
        x = as_matrix(x, "x")
        if x.shape[1] != self.d_in:
            raise ShapeError(f"input width {x.shape[1]} != {self.d_in}")
        out = matmul(matmul(x, self.adapter.v), self.adapter.u,
                     transpose_b=True)
        if self.w0 is not None:
            out = out + matmul(x, self.w0, transpose_b=True)
        self.captured_x = x
        return out

    def backward(self, s) -> np.ndarray:
        """Capture the output gradient and return the input gradient."""
        s = as_matrix(s, "s")
        if self.captured_x is None:
            raise StaleCaptureError("backward without a matching forward")
        if s.shape != (self.captured_x.shape[0], self.d_out):
            raise ShapeError(
                f"output gradient shape {s.shape} does not match "
                f"({self.captured_x.shape[0]}, {self.d_out})")
        self.captured_s = s
        grad = matmul(matmul(s, self.adapter.u), self.adapter.v,
                      transpose_b=True)
        if self.w0 is not None:
            grad = grad + matmul(s, self.w0)
        return grad

    def clear_captures(self) -> None:
        self.captured_x = None
        self.captured_s = None


@dataclass
class DenseLinear:
    """Plain dense linear layer; used by the full-training baseline."""

    w: np.ndarray
    captured_x: Optional[np.ndarray] = None
    captured_s: Optional[np.ndarray] = None

    def __post_init__(self):
        self.w = as_matrix(self.w, "w")

    @property
    def d_out(self) -> int:
        return self.w.shape[0]

    @property
    def d_in(self) -> int:
        return self.w.shape[1]

    def forward(self, x) -> np.ndarray:
        x = as_matrix(x, "x")
        self.captured_x = x
        return matmul(x, self.w, transpose_b=True)

    def backward(self, s) -> np.ndarray:
        if self.captured_x is None:
            raise StaleCaptureError("backward without a matching forward")
        self.captured_s = as_matrix(s, "s")
        return matmul(s, self.w)

    def weight_grad(self) -> np.ndarray:
        return matmul(self.captured_s, self.captured_x, transpose_a=True)

    def clear_captures(self) -> None:
        self.captured_x = None
        self.captured_s = None


def factor_grads(layer: LoraLinear, consume: bool = False):
    """Factor gradients G_u = S^T (X v), G_v = X^T (S u) from captures."""
    if layer.captured_x is None or layer.captured_s is None:
        raise StaleCaptureError("no fresh captures for factor gradients")
    x, s = layer.captured_x, layer.captured_s
    g_u = matmul(s, matmul(x, layer.adapter.v), transpose_a=True)
    g_v = matmul(x, matmul(s, layer.adapter.u), transpose_a=True)
    if consume:
        layer.clear_captures()
    return g_u, g_v


def grad_pair(layer):
    """The captured full gradient as a thin pair (S^T, X^T)."""
    if layer.captured_x is None or layer.captured_s is None:
        raise StaleCaptureError("no fresh captures for the gradient pair")
    return layer.captured_s.T, layer.captured_x.T


# ---------------------------------------------------------------------------
# Linear factorization task: min over (U, V) of 0.5 ||U V^T - W||_F^2,
# with optional column minibatching.

@dataclass
class LinearTask:
    target: np.ndarray
    batch_size: Optional[int] = None  # None means full batch
    seed: int = 0

    def __post_init__(self):
        self.target = as_matrix(self.target, "target")
        if self.batch_size is not None:
            if not 1 <= self.batch_size <= self.target.shape[1]:
                raise ShapeError(
                    f"batch size {self.batch_size} invalid for "
                    f"{self.target.shape[1]} columns")

    @property
    def d_out(self) -> int:
        return self.target.shape[0]

    @property
    def d_in(self) -> int:
        return self.target.shape[1]


def make_linear_target(d_out, d_in, rng, singular_values=None) -> np.ndarray:
    """Gaussian target, or one with a prescribed singular spectrum."""
    if singular_values is None:
        return rng.standard_normal((d_out, d_in))
    sv = np.asarray(singular_values, dtype=np.float64)
    if sv.ndim != 1 or sv.size > min(d_out, d_in):
        raise ShapeError("invalid singular value list")
    if np.any(sv < 0) or np.any(np.diff(sv) > 0):
        raise ShapeError("singular values must be nonincreasing and >= 0")
    qa, _ = np.linalg.qr(rng.standard_normal((d_out, sv.size)))
    qb, _ = np.linalg.qr(rng.standard_normal((d_in, sv.size)))
    return (qa * sv) @ qb.T


def sample_batch(task: LinearTask, rng) -> np.ndarray:
    """Column indices for one step: all columns, or a fresh subset
    drawn without replacement."""
    n = task.d_in
    if task.batch_size is None or task.batch_size == n:
        return np.arange(n)
    return rng.choice(n, size=task.batch_size, replace=False)


def linear_task_grad(task: LinearTask, adapter: FactorPair, indices):
    """Loss and gradient of the column-sampled objective.

    Returns ``(left, right, loss)`` where ``left @ right.T`` is the
    gradient of the rescaled (unbiased) sampled loss; ``right`` is the
    column-selection matrix, so the pair stays thin at width B.
    """
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("indices must be a nonempty flat sequence")
    if idx.min() < 0 or idx.max() >= task.d_in:
        raise ShapeError(f"column index out of range [0, {task.d_in})")
    v_sel = adapter.v[idx, :]
    diff = matmul(adapter.u, v_sel, transpose_b=True) \
        - sample_columns(task.target, idx)
    scale = task.d_in / idx.size
    left = scale * diff
    right = np.zeros((task.d_in, idx.size))
    right[idx, np.arange(idx.size)] = 1.0
    loss = 0.5 * scale * float(np.sum(diff * diff))
    return left, right, loss


def linear_task_loss(task: LinearTask, adapter: FactorPair,
                     indices=None) -> float:
    if indices is None:
        indices = np.arange(task.d_in)
    _, _, loss = linear_task_grad(task, adapter, indices)
    return loss


def linear_task_grad_dense(task: LinearTask, w, indices):
    """Dense-iterate variant for the dense baselines."""
    w = as_matrix(w, "w")
    idx = np.asarray(indices, dtype=np.intp)
    diff = sample_columns(w, idx) - sample_columns(task.target, idx)
    scale = task.d_in / idx.size
    grad = np.zeros_like(w)
    grad[:, idx] = scale * diff
    loss = 0.5 * scale * float(np.sum(diff * diff))
    return grad, loss


# ---------------------------------------------------------------------------
# Adapter initializations.

def init_adapter_random(d_out, d_in, r, rng) -> FactorPair:
    """Rank-r pair from the truncated SVD of a random matrix scaled to
    unit spectral norm."""
    m = rng.standard_normal((d_out, d_in))
    m /= np.linalg.svd(m, compute_uv=False)[0]
    return truncated_svd(m, r)


def init_adapter_svd(target, r) -> FactorPair:
    """Rank-r truncated SVD of the task target."""
    return truncated_svd(target, r)


def init_adapter_lora(d_out, d_in, r, rng) -> FactorPair:
    """Random left factor, zero right factor: zero product at start."""
    return FactorPair(rng.standard_normal((d_out, r)) / math.sqrt(r),
                      np.zeros((d_in, r)))


# ---------------------------------------------------------------------------
# Synthetic MLP task: Gaussian inputs, planted teacher labels.

@dataclass
class MlpTask:
    dims: list
    nonlinearity: str = "relu"
    loss: str = "mse"
    n_samples: int = 256
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) < 2 or any(d < 1 for d in self.dims):
            raise ShapeError("dims must list at least two positive sizes")
        if self.nonlinearity not in ("relu", "tanh"):
            raise ShapeError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.loss not in ("mse", "cross_entropy"):
            raise ShapeError(f"unknown loss {self.loss!r}")


def _act(task, z):
    return np.maximum(z, 0.0) if task.nonlinearity == "relu" else np.tanh(z)


def _act_grad(task, z):
    if task.nonlinearity == "relu":
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def _teacher_weights(task, rng):
    return [rng.standard_normal((do, di)) / math.sqrt(di)
            for di, do in zip(task.dims[:-1], task.dims[1:])]


def _dense_forward(task, weights, x):
    h = x
    for w in weights[:-1]:
        h = _act(task, h @ w.T)
    return h @ weights[-1].T


def make_mlp_dataset(task: MlpTask, rng):
    """Gaussian inputs with teacher outputs (mse) or teacher argmax
    labels (cross_entropy)."""
    x = rng.standard_normal((task.n_samples, task.dims[0]))
    logits = _dense_forward(task, _teacher_weights(task, rng), x)
    if task.loss == "mse":
        return x, logits
    return x, np.argmax(logits, axis=1)


def make_mlp_layers(task: MlpTask, rank, rng):
    """Frozen random base weights with standard zero-product adapters."""
    layers = []
    for d_in, d_out in zip(task.dims[:-1], task.dims[1:]):
        if rank > min(d_in, d_out):
            raise ShapeError(
                f"rank {rank} exceeds layer dimensions ({d_out}, {d_in})")
        w0 = rng.standard_normal((d_out, d_in)) / math.sqrt(d_in)
        layers.append(LoraLinear(w0, init_adapter_lora(d_out, d_in, rank, rng)))
    return layers


def _loss_and_logit_grad(task, logits, y):
    b = logits.shape[0]
    if task.loss == "mse":
        diff = logits - y
        return 0.5 * float(np.sum(diff * diff)) / b, diff / b
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=1, keepdims=True)
    rows = np.arange(b)
    loss = float(-np.mean(np.log(probs[rows, y])))
    grad = probs.copy()
    grad[rows, y] -= 1.0
    return loss, grad / b


def mlp_loss(task: MlpTask, layers, x, y) -> float:
    logits = x
    for layer in layers[:-1]:
        logits = _act(task, layer.forward(logits))
    logits = layers[-1].forward(logits)
    return _loss_and_logit_grad(task, logits, y)[0]


def mlp_forward_backward(task: MlpTask, layers, x, y) -> float:
    """Full forward then reverse sweep; every layer ends up with fresh
    X and S captures.  Returns the batch loss."""
    h = as_matrix(x, "x")
    pre = []
    for layer in layers[:-1]:
        z = layer.forward(h)
        pre.append(z)
        h = _act(task, z)
    logits = layers[-1].forward(h)
    loss, s = _loss_and_logit_grad(task, logits, y)
    for i in reversed(range(len(layers))):
        g_in = layers[i].backward(s)
        if i > 0:
            s = g_in * _act_grad(task, pre[i - 1])
    return loss
