"""Optimizer step rules over low-rank-adapted layers.

The main step refines the adapter toward the rank-r least-squares
solution of the proximal sub-problem built from the captured batch
input X and output gradient S (so the full gradient S^T X is only ever
handled as a thin pair).  Momentum is kept as a separate low-rank pair
refreshed by the same alternating subroutine; an optional pair of
damped low-rank metrics tracks running averages of X^T X / B and
S^T S / B as non-Euclidean scales.

Baselines: the one-step preconditioned factor update, heavy-ball SGD
and AdamW on the factors, projected/naive factor momentum, and the
dense projection oracle that takes a full step and truncates back to
rank r by SVD.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ShapeError, StaleCaptureError
from .lowrank import FactorPair, WeightedFactorSum, gram, truncated_svd
from .lorsum import LorsumConfig, Metric, lorsum
from .matcore import as_matrix, matmul, solve_spd, thin_qr

# Tiny proximal weight that keeps the r x r systems positive definite
# when momentum or metric factors are rank-deficient (e.g. right after
# their zero-product initialization).  Deliberately well above the
# Cholesky pivot tolerance and far below any tracking tolerance.
RESCUE_LAMBDA = 1e-9


@dataclass
class OploraConfig:
    """Hyperparameters of the alternating-update optimizer.

    ``lambda_u`` / ``lambda_v`` are the proximal weights of the weight
    sub-problem; the step multiplies them by ``eta`` before handing them
    to the subroutine.  ``beta == 1`` disables metric scaling entirely.
    """

    eta: float
    alpha: float = 0.0
    lambda_u: float = 1e-3
    lambda_v: float = 1e-3
    beta: float = 1.0
    delta: float = 1e-4
    num_iters: int = 1
    momentum_rank: Optional[int] = None
    metric_rank: Optional[int] = None
    mode: str = "alternating"
    start_turn: str = "in_first"

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ShapeError("momentum coefficient must lie in [0, 1)")
        if not 0.0 < self.beta <= 1.0:
            raise ShapeError("scale smoothing must lie in (0, 1]")
        if self.delta < 0 or self.lambda_u < 0 or self.lambda_v < 0:
            raise ShapeError("weights and damping must be nonnegative")
        if self.num_iters < 1:
            raise ShapeError("num_iters must be at least 1")


@dataclass
class OploraState:
    """Per-layer optimizer state; mutated only by a successful step."""

    hyper: OploraConfig
    init_seed: int = 0
    momentum: Optional[FactorPair] = None
    metric_u: Metric = field(default_factory=Metric.identity)
    metric_v: Metric = field(default_factory=Metric.identity)
    step_count: int = 0

    def scalar_count(self) -> int:
        """Persistent state size in scalars (for memory audits)."""
        total = 0
        if self.momentum is not None:
            total += self.momentum.scalar_count()
        total += self.metric_u.scalar_count()
        total += self.metric_v.scalar_count()
        return total


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, tag])))


def _init_momentum(d_out, d_in, rank, seed) -> FactorPair:
    # Random left factor, zero right factor: the product is exactly zero
    # but the left subspace is full rank, so the first alternating
    # update can move out of the degenerate start.
    rng = _stream(seed, 11)
    return FactorPair(rng.standard_normal((d_out, rank)),
                      np.zeros((d_in, rank)))


def _init_metric(dim, rank, delta, seed, tag) -> Metric:
    # Orthonormal factor, so the low-rank part starts as a projector
    # QQ^T; delta supplies the remaining mass of the identity.
    rng = _stream(seed, tag)
    q, _ = thin_qr(rng.standard_normal((dim, rank)))
    return Metric.damped(q, coeff=1.0, delta=delta)


def _sym_psd_factor(u, v, rank) -> np.ndarray:
    """Best rank-``rank`` PSD factor of the symmetric part of u v^T.

    Works in the joint column space of (u, v): a reduced QR followed by
    a 2m x 2m symmetric eigendecomposition.  Negative eigenvalues are
    clipped to zero, keeping the representation PSD with equal factors.
    """
    z = np.hstack([u, v])
    q, r = np.linalg.qr(z, mode="reduced")
    m = u.shape[1]
    a = 0.5 * (r[:, :m] @ r[:, m:].T + r[:, m:] @ r[:, :m].T)
    vals, vecs = np.linalg.eigh(a)
    top = np.clip(vals[-rank:], 0.0, None)
    return q @ (vecs[:, -rank:] * np.sqrt(top))


def _metric_ema(metric: Metric, batch, beta, num_iters) -> Metric:
    """Move the metric toward the batch second moment.

    Tracks ``beta * D + (1 - beta) * batch^T batch / B`` with the same
    alternating subroutine used everywhere else, then re-symmetrizes so
    both metric factors stay equal.
    """
    b = batch.shape[0]
    f = metric.factor
    anchor = FactorPair(f, f)
    terms = WeightedFactorSum([
        (beta * metric.coeff, f, f),
        ((1.0 - beta) / b, batch.T, batch.T),
    ])
    cfg = LorsumConfig(num_iters=num_iters, lambda_u=RESCUE_LAMBDA,
                       lambda_v=RESCUE_LAMBDA)
    est = lorsum(anchor, terms, cfg)
    factor = _sym_psd_factor(est.u, est.v, f.shape[1])
    return Metric.damped(factor, coeff=1.0, delta=metric.delta)


def kfac_scale_update(state: OploraState, x_batch, s_batch, beta):
    """EMA-update both metrics from a captured batch.

    Returns the updated ``(metric_u, metric_v)`` without touching the
    state; ``beta == 1`` returns the metrics unchanged.
    """
    if beta == 1.0:
        return state.metric_u, state.metric_v
    x_batch = as_matrix(x_batch, "x_batch")
    s_batch = as_matrix(s_batch, "s_batch")
    if x_batch.shape[0] == 0 or s_batch.shape[0] == 0:
        raise ShapeError("metric update needs a nonempty batch")
    if state.metric_u.kind != "damped_lowrank" or \
            state.metric_v.kind != "damped_lowrank":
        raise ShapeError("metric factors are not initialized")
    k = state.hyper.num_iters
    metric_u = _metric_ema(state.metric_u, s_batch, beta, k)
    metric_v = _metric_ema(state.metric_v, x_batch, beta, k)
    return metric_u, metric_v


def momentum_update_lor(state: OploraState, momentum: FactorPair,
                        grad_left, grad_right) -> FactorPair:
    """Refresh the low-rank momentum pair toward alpha * M + G.

    The gradient enters as the thin pair ``grad_left @ grad_right.T``.
    A tiny rescue weight keeps the solves positive definite while the
    buffer is still rank-deficient.
    """
    h = state.hyper
    terms = WeightedFactorSum([
        (h.alpha, momentum.u, momentum.v),
        (1.0, grad_left, grad_right),
    ])
    cfg = LorsumConfig(num_iters=h.num_iters, lambda_u=RESCUE_LAMBDA,
                       lambda_v=RESCUE_LAMBDA, start_turn=h.start_turn)
    return lorsum(momentum, terms, cfg)


def _require_captures(layer):
    if layer.captured_x is None or layer.captured_s is None:
        raise StaleCaptureError(
            "optimizer step needs fresh forward/backward captures")
    return layer.captured_x, layer.captured_s


def oplora_step(layer, state: OploraState) -> FactorPair:
    """One alternating-update step on a captured layer.

    The weight update passes the full unprojected momentum step
    ``U V^T - eta G - eta alpha M`` to the subroutine (three thin
    terms); the momentum buffer is then refreshed separately.  State and
    layer are only mutated once everything has succeeded.
    """
    x, s = _require_captures(layer)
    h = state.hyper
    adapter = layer.adapter
    d_out, d_in = adapter.d_out, adapter.d_in

    metric_u, metric_v = state.metric_u, state.metric_v
    if h.beta < 1.0:
        m_rank = h.metric_rank or adapter.rank
        if metric_u.kind != "damped_lowrank":
            metric_u = _init_metric(d_out, m_rank, h.delta, state.init_seed, 21)
            metric_v = _init_metric(d_in, m_rank, h.delta, state.init_seed, 22)
        else:
            metric_u, metric_v = kfac_scale_update(state, x, s, h.beta)

    momentum = state.momentum
    if h.alpha > 0.0 and momentum is None:
        momentum = _init_momentum(d_out, d_in,
                                  h.momentum_rank or adapter.rank,
                                  state.init_seed)

    term_list = [
        (1.0, adapter.u, adapter.v),
        (-h.eta, s.T, x.T),
    ]
    if h.alpha > 0.0:
        term_list.append((-h.eta * h.alpha, momentum.u, momentum.v))
    cfg = LorsumConfig(num_iters=h.num_iters,
                       lambda_u=h.lambda_u * h.eta,
                       lambda_v=h.lambda_v * h.eta,
                       start_turn=h.start_turn, mode=h.mode)
    new_pair = lorsum(adapter, WeightedFactorSum(term_list), cfg,
                      metric_u, metric_v)

    new_momentum = momentum
    if h.alpha > 0.0:
        new_momentum = momentum_update_lor(state, momentum, s.T, x.T)

    state.metric_u = metric_u
    state.metric_v = metric_v
    state.momentum = new_momentum
    state.step_count += 1
    layer.adapter = new_pair
    layer.clear_captures()
    return new_pair


def prec_lora_step(layer, eta: float, lam: float = 0.0) -> FactorPair:
    """Closed-form preconditioned factor step.

    U <- U - eta G V (V^T V + lam I)^-1 and the V analog, both
    preconditioners evaluated at the pre-step factors.  G is applied as
    thin products G V = S^T (X V).
    """
    x, s = _require_captures(layer)
    u, v = layer.adapter.u, layer.adapter.v
    r = layer.adapter.rank
    eye = np.eye(r)
    gv = matmul(s, matmul(x, v), transpose_a=True)
    gtu = matmul(x, matmul(s, u), transpose_a=True)
    new_u = u - eta * solve_spd(gram(v) + lam * eye, gv.T).T
    new_v = v - eta * solve_spd(gram(u) + lam * eye, gtu.T).T
    pair = FactorPair(new_u, new_v)
    layer.adapter = pair
    layer.clear_captures()
    return pair


@dataclass
class SvdLoraState:
    """Dense adapter and dense momentum for the projection oracle."""

    dense_weight: np.ndarray
    dense_momentum: np.ndarray

    def __post_init__(self):
        self.dense_weight = as_matrix(self.dense_weight, "dense_weight")
        self.dense_momentum = as_matrix(self.dense_momentum, "dense_momentum")
        if self.dense_weight.shape != self.dense_momentum.shape:
            raise ShapeError("weight and momentum shapes disagree")

    @staticmethod
    def from_pair(pair: FactorPair) -> "SvdLoraState":
        w = pair.u @ pair.v.T
        return SvdLoraState(w, np.zeros_like(w))


def svdlora_step(state: SvdLoraState, grad, eta: float, alpha: float,
                 r: int) -> FactorPair:
    """Full dense heavy-ball step followed by a rank-r SVD projection.

    The dense iterate is replaced by its projection after every step;
    the momentum stays full rank.
    """
    grad = as_matrix(grad, "grad")
    if grad.shape != state.dense_weight.shape:
        raise ShapeError("gradient shape does not match the adapter")
    state.dense_momentum = alpha * state.dense_momentum + grad
    state.dense_weight = state.dense_weight - eta * state.dense_momentum
    pair = truncated_svd(state.dense_weight, r)
    state.dense_weight = pair.u @ pair.v.T
    return pair


@dataclass
class SgdState:
    momentum_u: np.ndarray
    momentum_v: np.ndarray

    @staticmethod
    def like(pair: FactorPair) -> "SgdState":
        return SgdState(np.zeros_like(pair.u), np.zeros_like(pair.v))


def sgd_step(factors: FactorPair, grads, eta: float, alpha: float,
             state: SgdState) -> FactorPair:
    """Heavy-ball SGD treating U and V as independent parameter blocks."""
    g_u, g_v = grads
    state.momentum_u = alpha * state.momentum_u + g_u
    state.momentum_v = alpha * state.momentum_v + g_v
    return FactorPair(factors.u - eta * state.momentum_u,
                      factors.v - eta * state.momentum_v)


@dataclass
class AdamwState:
    m_u: np.ndarray
    v_u: np.ndarray
    m_v: np.ndarray
    v_v: np.ndarray
    t: int = 0

    @staticmethod
    def like(pair: FactorPair) -> "AdamwState":
        return AdamwState(np.zeros_like(pair.u), np.zeros_like(pair.u),
                          np.zeros_like(pair.v), np.zeros_like(pair.v))


def _adamw_block(p, g, m, v, t, eta, beta1, beta2, eps, weight_decay):
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    p = p * (1.0 - eta * weight_decay)
    p = p - eta * m_hat / (np.sqrt(v_hat) + eps)
    return p, m, v


def adamw_step(factors: FactorPair, grads, eta: float,
               betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 1e-2,
               state: AdamwState = None) -> FactorPair:
    """AdamW with decoupled weight decay on both factors."""
    g_u, g_v = grads
    beta1, beta2 = betas
    state.t += 1
    new_u, state.m_u, state.v_u = _adamw_block(
        factors.u, g_u, state.m_u, state.v_u, state.t,
        eta, beta1, beta2, eps, weight_decay)
    new_v, state.m_v, state.v_v = _adamw_block(
        factors.v, g_v, state.m_v, state.v_v, state.t,
        eta, beta1, beta2, eps, weight_decay)
    return FactorPair(new_u, new_v)


@dataclass
class ProjMomentumState:
    """Factor-shaped momentum plus the previous iterates it projects through."""

    momentum_u: np.ndarray
    momentum_v: np.ndarray
    prev_u: Optional[np.ndarray] = None
    prev_v: Optional[np.ndarray] = None

    @staticmethod
    def like(pair: FactorPair) -> "ProjMomentumState":
        return ProjMomentumState(np.zeros_like(pair.u), np.zeros_like(pair.v))


def _factor_grads_thin(layer):
    x, s = _require_captures(layer)
    u, v = layer.adapter.u, layer.adapter.v
    g_u = matmul(s, matmul(x, v), transpose_a=True)
    g_v = matmul(x, matmul(s, u), transpose_a=True)
    return g_u, g_v


def momentum_update_naive(state: ProjMomentumState, layer,
                          alpha: float, lam: float = 0.0):
    """Accumulate preconditioned factor gradients without re-projection:

        M_u <- G_u (V^T V + lam I)^-1 + alpha M_u   (and the V analog).
    """
    g_u, g_v = _factor_grads_thin(layer)
    u, v = layer.adapter.u, layer.adapter.v
    eye = np.eye(layer.adapter.rank)
    pre_u = solve_spd(gram(v) + lam * eye, g_u.T).T
    pre_v = solve_spd(gram(u) + lam * eye, g_v.T).T
    state.momentum_u = pre_u + alpha * state.momentum_u
    state.momentum_v = pre_v + alpha * state.momentum_v
    state.prev_u = u.copy()
    state.prev_v = v.copy()
    return state.momentum_u, state.momentum_v


def momentum_update_proj(state: ProjMomentumState, layer,
                         alpha: float, lam: float = 0.0):
    """Re-project the momentum through the current factor subspaces:

        M_u <- G_u (V^T V + lam I)^-1
               + alpha M_u (V_prev^T V) (V^T V + lam I)^-1

    and the V analog with U grams.  The current factors are stashed as
    the next step's previous iterates.
    """
    g_u, g_v = _factor_grads_thin(layer)
    u, v = layer.adapter.u, layer.adapter.v
    eye = np.eye(layer.adapter.rank)
    num_u = g_u
    num_v = g_v
    if state.prev_u is not None:
        num_u = num_u + alpha * matmul(
            state.momentum_u, matmul(state.prev_v, v, transpose_a=True))
        num_v = num_v + alpha * matmul(
            state.momentum_v, matmul(state.prev_u, u, transpose_a=True))
    state.momentum_u = solve_spd(gram(v) + lam * eye, num_u.T).T
    state.momentum_v = solve_spd(gram(u) + lam * eye, num_v.T).T
    state.prev_u = u.copy()
    state.prev_v = v.copy()
    return state.momentum_u, state.momentum_v


def proj_lora_step(layer, state: ProjMomentumState, eta: float,
                   alpha: float, lam: float = 0.0,
                   projected: bool = True) -> FactorPair:
    """Preconditioned factor step driven by projected or naive momentum."""
    if projected:
        m_u, m_v = momentum_update_proj(state, layer, alpha, lam)
    else:
        m_u, m_v = momentum_update_naive(state, layer, alpha, lam)
    pair = FactorPair(layer.adapter.u - eta * m_u,
                      layer.adapter.v - eta * m_v)
    layer.adapter = pair
    layer.clear_captures()
    return pair
