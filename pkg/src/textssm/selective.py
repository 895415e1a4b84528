"""Input-dependent and query-dependent selection for diagonal SSMs.

Shapes follow ``(..., L, D)`` for sequences (``...`` is any mix of batch and
node axes), ``(..., L, N)`` for per-step B/C and ``(D, N)`` for the state
matrix. The query ``q`` has shape ``(..., Dq)`` where its leading axes match
the batch axes of the sequence; it is broadcast over nodes and time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ssm import scan_parallel, zoh_coefficient, zoh_coefficient_dA

try:
    from . import _kernels
except ImportError:  # pragma: no cover - numba missing
    _kernels = None

# "fused" runs the numba kernels, "numpy" the vectorized array path
BACKEND = "fused" if _kernels is not None else "numpy"


class SelectionProjections:
    """Weights of the selection mechanism.

    ``W_B``, ``W_C`` map ``in_dim -> N``, ``W_delta`` maps ``in_dim -> D``;
    ``in_dim`` is ``D`` without a query and ``D + Dq`` with one (rows
    ``[:D]`` act on the motion feature, rows ``[D:]`` on the query).
    ``A = -exp(log_A)`` keeps the state matrix strictly negative.
    """

    def __init__(self, D: int, N: int, query_dim: int = 0, rng=None, dt_range=(1e-3, 1e-1)):
        rng = rng if rng is not None else np.random.default_rng(0)
        in_dim = D + query_dim
        self.D, self.N, self.query_dim = D, N, query_dim
        scale = 1.0 / np.sqrt(in_dim)
        self.W_B = ad.parameter(rng.normal(0, scale, (in_dim, N)))
        self.W_C = ad.parameter(rng.normal(0, scale, (in_dim, N)))
        self.W_delta = ad.parameter(rng.normal(0, scale * 0.1, (in_dim, D)))
        # softplus(bias) spans dt_range log-uniformly, as in Mamba's dt init
        dt = np.exp(rng.uniform(np.log(dt_range[0]), np.log(dt_range[1]), D))
        self.bias_delta = ad.parameter(dt + np.log(-np.expm1(-dt)))
        self.log_A = ad.parameter(np.log(np.tile(np.arange(1, N + 1, dtype=np.float64), (D, 1))))

    def parameters(self) -> dict[str, Tensor]:
        return {
            "W_B": self.W_B,
            "W_C": self.W_C,
            "W_delta": self.W_delta,
            "bias_delta": self.bias_delta,
            "log_A": self.log_A,
        }

    def A(self) -> Tensor:
        return ad.mul(ad.exp(self.log_A), -1.0)


@dataclass
class SelectedParams:
    """Per-step SSM parameters produced by a selection mechanism."""

    B: Tensor  # (..., L, N)
    C: Tensor  # (..., L, N)
    delta: Tensor  # (..., L, D), positive
    A: Tensor  # (D, N), negative

    @property
    def A_bar(self) -> np.ndarray:
        return np.exp(self.delta.data[..., None] * self.A.data)

    @property
    def B_bar(self) -> np.ndarray:
        return zoh_coefficient(self.delta.data[..., None], self.A.data) * self.B.data[..., None, :]


def _project(x: Tensor, W: Tensor, q: Tensor | None, D: int) -> Tensor:
    """One affine map over ``[x || q]``, evaluated block-wise."""
    if q is None:
        return ad.linear(x, W)
    y = ad.linear(x, W[:D])
    yq = ad.linear(q, W[D:])  # (..., out)
    lead = q.shape[:-1]
    extra = x.ndim - 1 - len(lead)
    yq = ad.reshape(yq, lead + (1,) * extra + (W.shape[1],))
    return ad.add(y, yq)


def _select(X: Tensor, proj: SelectionProjections, q: Tensor | None) -> SelectedParams:
    D = proj.D
    if X.shape[-1] != D:
        raise ValueError(f"input width {X.shape[-1]} != projection width {D}")
    B = _project(X, proj.W_B, q, D)
    C = _project(X, proj.W_C, q, D)
    delta = ad.softplus(ad.add(_project(X, proj.W_delta, q, D), proj.bias_delta))
    return SelectedParams(B=B, C=C, delta=delta, A=proj.A())


def select_params(X, proj: SelectionProjections) -> SelectedParams:
    """Selection from the input alone: B, C, delta are projections of X."""
    X = ad.as_tensor(X)
    if proj.query_dim:
        W = {k: v for k, v in proj.parameters().items()}
        sub = SelectionProjections.__new__(SelectionProjections)
        sub.D, sub.N, sub.query_dim = proj.D, proj.N, 0
        sub.W_B, sub.W_C, sub.W_delta = W["W_B"][: proj.D], W["W_C"][: proj.D], W["W_delta"][: proj.D]
        sub.bias_delta, sub.log_A = proj.bias_delta, proj.log_A
        proj = sub
    return _select(X, proj, None)


def select_params_text(X, q, proj: SelectionProjections) -> SelectedParams:
    """Selection controlled by both the input and a query embedding ``q``."""
    X, q = ad.as_tensor(X), ad.as_tensor(q)
    if q.shape[-1] != proj.query_dim:
        raise ValueError(f"query width {q.shape[-1]} != projection query width {proj.query_dim}")
    if not np.all(np.isfinite(q.data)):
        raise ValueError("query embedding must be finite")
    return _select(X, proj, q)


def _phi_from_abar(A_bar, delta, A):
    """ZOH input factor ``(A_bar - 1)/A``; series where ``|delta*A|`` is tiny."""
    x = delta[..., None] * A
    small = np.abs(x) < 1e-4
    phi = (A_bar - 1.0) / A
    if small.any():
        phi[small] = zoh_coefficient(np.broadcast_to(delta[..., None], x.shape)[small], np.broadcast_to(A, x.shape)[small])
    return phi, small


def _scan_forward(u, delta, A, Bm, Cm):
    A_bar = np.exp(delta[..., None] * A)
    phi, _ = _phi_from_abar(A_bar, delta, A)
    bx = phi * (Bm[..., None, :] * u[..., None])
    h = scan_parallel(A_bar, bx, axis=-3)
    y = (h * Cm[..., None, :]).sum(axis=-1)
    return y, h, A_bar


def selective_scan(X, params: SelectedParams) -> Tensor:
    """Run ``h_t = A_bar_t h_{t-1} + B_bar_t x_t``, ``y_t = <C_t, h_t>`` per channel.

    Forward uses the parallel scan. The backward pass is written by hand: the
    state adjoint obeys the reversed recurrence
    ``lam_t = C_t gy_t + A_bar_{t+1} lam_{t+1}``, which is evaluated with the
    same scan. The states ``h`` and transitions ``A_bar`` are kept for it, so
    retained memory is linear in ``L``.
    """
    X = ad.as_tensor(X)
    delta, A, Bm, Cm = params.delta, params.A, params.B, params.C
    if X.shape != delta.shape:
        raise ValueError(f"input shape {X.shape} != delta shape {delta.shape}")
    if Bm.shape[:-1] != X.shape[:-1] or Cm.shape != Bm.shape:
        raise ValueError(f"B/C shapes {Bm.shape}, {Cm.shape} do not match input {X.shape}")
    for name, t in (("delta", delta), ("A", A), ("B", Bm), ("C", Cm)):
        if not np.all(np.isfinite(t.data)):
            raise ad.NonFiniteError(f"selective_scan: non-finite {name}")
    u, dl, Ad, Bd, Cd = X.data, delta.data, A.data, Bm.data, Cm.data
    if BACKEND == "fused":
        y, h = _kernels.fused_forward(u, dl, Ad, Bd, Cd)

        def backward_fused(gy):
            return _kernels.fused_backward(u, dl, Ad, Bd, Cd, h, gy)

        saved = h.size + u.size + dl.size + Bd.size + Cd.size
        return ad._make(y, (X, delta, A, Bm, Cm), backward_fused, saved, "selective_scan")

    y, h, A_bar = _scan_forward(u, dl, Ad, Bd, Cd)

    def backward(gy):
        phi, small = _phi_from_abar(A_bar, dl, Ad)
        gh = gy[..., None] * Cd[..., None, :]
        A_next = np.empty_like(A_bar)
        A_next[..., :-1, :, :] = A_bar[..., 1:, :, :]
        A_next[..., -1, :, :] = 1.0
        lam = np.flip(scan_parallel(np.flip(A_next, -3), np.flip(gh, -3), axis=-3), -3)
        h_prev = np.empty_like(h)
        h_prev[..., 0, :, :] = 0.0
        h_prev[..., 1:, :, :] = h[..., :-1, :, :]
        g_abar = lam * h_prev
        g_C = (gy[..., None] * h).sum(axis=-2)
        lam_phi = lam * phi
        g_u = (lam_phi * Bd[..., None, :]).sum(axis=-1)
        g_B = (lam_phi * u[..., None]).sum(axis=-2)
        g_phi = lam * (Bd[..., None, :] * u[..., None])
        # d A_bar/d delta = A A_bar and d phi/d delta = A_bar
        T = (g_abar * Ad + g_phi) * A_bar
        g_delta = T.sum(axis=-1)
        # d A_bar/dA = delta A_bar and d phi/dA = (delta A_bar - phi)/A
        dphi_dA = (dl[..., None] * A_bar - phi) / Ad
        if small.any():
            dphi_dA[small] = zoh_coefficient_dA(
                np.broadcast_to(dl[..., None], small.shape)[small], np.broadcast_to(Ad, small.shape)[small]
            )
        g_A = g_abar * A_bar * dl[..., None] + g_phi * dphi_dA
        g_A = g_A.reshape(-1, *Ad.shape).sum(axis=0)
        return g_u, g_delta, g_A, g_B, g_C

    saved = h.size + A_bar.size + u.size + dl.size + Bd.size + Cd.size
    return ad._make(y, (X, delta, A, Bm, Cm), backward, saved, "selective_scan")


def selective_scan_tape(X, params: SelectedParams) -> Tensor:
    """Same recurrence composed from elementary tape ops (slow; test oracle)."""
    X = ad.as_tensor(X)
    dA = ad.mul(ad.reshape(params.delta, params.delta.shape + (1,)), params.A)
    A_bar = ad.exp(dA)
    phi = ad.div(ad.sub(A_bar, 1.0), params.A)
    Bm = params.B
    bx = ad.mul(
        ad.mul(phi, ad.reshape(Bm, Bm.shape[:-1] + (1, Bm.shape[-1]))),
        ad.reshape(X, X.shape + (1,)),
    )
    L = X.shape[-2]
    h = None
    ys = []
    for t in range(L):
        a_t = A_bar[..., t, :, :]
        b_t = bx[..., t, :, :]
        h = b_t if h is None else ad.add(ad.mul(a_t, h), b_t)
        c_t = params.C[..., t : t + 1, :]  # (..., 1, N)
        ys.append(ad.sum_axis(ad.mul(h, c_t), -1, keepdims=False))
    ys = [ad.reshape(y, y.shape[:-1] + (1, y.shape[-1])) for y in ys]
    return ad.concat(ys, axis=-2)


def gated_rnn_reference(x, q, w_delta, bias: float = 0.0, reading: str = "input"):
    """Scalar gated recurrence equivalent to a 1-state text-controlled SSM.

    With ``N = 1, A = -1, B = C = 1`` and ``delta = softplus(z)``, ZOH gives
    ``A_bar = 1 - sigmoid(z)`` and ``B_bar = sigmoid(z)``, so the selective scan
    is ``h_t = (1 - g_t) h_{t-1} + g_t x_t`` with ``g_t = sigmoid(z_t)`` and
    ``z_t = w_delta . [x_t || q] + bias``.

    ``reading="printed"`` evaluates the alternative form
    ``h_t = (1 - g_t) h_{t-1} + g_t h_t``; for any ``g_t < 1`` its only solution
    is ``h_t = h_{t-1}``, so it returns the (constant, zero) state sequence.

    Args:
        x: length-L scalar input sequence.
        q: query embedding, shape ``(Dq,)``.
        w_delta: weights of length ``1 + Dq`` over ``[x_t || q]``.
        bias: additive delta bias.
        reading: ``"input"`` or ``"printed"``.

    Returns:
        (h, g): state sequence and gate values, both of length L.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    w_delta = np.asarray(w_delta, dtype=np.float64).reshape(-1)
    if w_delta.shape[0] != 1 + q.shape[0]:
        raise ValueError("gated_rnn_reference is the N=1 scalar-channel case; w_delta must have 1 + Dq entries")
    z = x * w_delta[0] + q @ w_delta[1:] + bias
    g = ad._sigmoid(z)
    h = np.zeros_like(x)
    prev = 0.0
    for t in range(x.shape[0]):
        prev = prev if reading == "printed" else (1.0 - g[t]) * prev + g[t] * x[t]
        h[t] = prev
    return h, g


def lemma_scan(x, q, w_delta, bias: float = 0.0, N: int = 1) -> np.ndarray:
    """Selective scan in the gated-RNN configuration (N=1, A=-1, B=C=1)."""
    if N != 1:
        raise ValueError("the gated-RNN correspondence requires N == 1")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    w_delta = np.asarray(w_delta, dtype=np.float64).reshape(-1)
    L = x.shape[0]
    z = x * w_delta[0] + q @ w_delta[1:] + bias
    params = SelectedParams(
        B=Tensor(np.ones((L, 1))),
        C=Tensor(np.ones((L, 1))),
        delta=ad.softplus(Tensor(z[:, None])),
        A=Tensor(-np.ones((1, 1))),
    )
    return selective_scan(Tensor(x[:, None]), params).data[:, 0]
