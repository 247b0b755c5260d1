"""Critic representations and the time-integral machinery they rely on.

The linear critic uses the basis ``(1 - t/T)^l`` and ``(1 - t/T)^l * x_i``
(l = 0..d, i = 1..m), ordered block-wise: the d+1 pure time powers first, then
the d+1 powers multiplying x_1, and so on.  All inter-jump time integrals of
basis products are polynomial in (1 - t/T) and evaluated from exact monomial
antiderivatives, so policy evaluation carries no time-discretization error.
Entropy integrals have no closed form and use Gauss-Legendre quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tinynn import MLP

DEFAULT_QUAD_ORDER = 8


@dataclass(frozen=True)
class QuadratureSpec:
    """Gauss-Legendre rule applied per inter-jump interval."""

    order: int = DEFAULT_QUAD_ORDER
    rule: str = "gauss-legendre"


@lru_cache(maxsize=None)
def _leggauss(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def quad_nodes(t1, t2, order: int):
    """Nodes and weights on [t1, t2]; supports array-valued endpoints.

    For scalar endpoints returns shapes (order,), for (B,)-shaped endpoints
    returns (B, order).
    """
    x, w = _leggauss(order)
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    half = 0.5 * (t2 - t1)
    mid = 0.5 * (t2 + t1)
    nodes = mid[..., None] + half[..., None] * x
    weights = half[..., None] * w
    return nodes, weights


class LinearCritic:
    """Linear value approximation J(t, x) = theta  phi(t, x)."""

    def __init__(self, m: int, d: int, T: float, theta=None):
        self.m = int(m)
        self.d = int(d)
        self.T = float(T)
        self.W = (self.m + 1) * (self.d + 1)
        if theta is None:
            theta = np.zeros(self.W)
        self.theta = np.asarray(theta, dtype=np.float64)
        if self.theta.shape != (self.W,):
            raise ValueError(f"theta must have shape ({self.W},)")
        # exponent table l + l' used by the product integrals
        ls = np.arange(self.d + 1)
        self._lsum = ls[:, None] + ls[None, :]

    # -- basis -------------------------------------------------------------

    def _upow(self, ts) -> np.ndarray:
        u = 1.0 - np.asarray(ts, dtype=np.float64) / self.T
        return u[..., None] ** np.arange(self.d + 1)

    def _aug(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.concatenate([np.ones((X.shape[0], 1)), X], axis=1)

    def basis_batch(self, ts, X) -> np.ndarray:
        """(B, W) basis matrix for times ``ts`` (B,) and states ``X`` (B, m)."""
        up = self._upow(ts)
        aug = self._aug(X)
        return (aug[:, :, None] * up[:, None, :]).reshape(len(aug), self.W)

    def basis(self, t, x) -> np.ndarray:
        return self.basis_batch(np.array([t]), np.asarray(x)[None, :])[0]

    def basis_dt(self, t, x) -> np.ndarray:
        """Exact time derivative of the basis vector."""
        ls = np.arange(self.d + 1, dtype=np.float64)
        u = 1.0 - t / self.T
        dup = np.zeros(self.d + 1)
        dup[1:] = -(ls[1:] / self.T) * u ** (ls[1:] - 1)
        aug = self._aug(np.asarray(x)[None, :])[0]
        return (aug[:, None] * dup[None, :]).reshape(self.W)

    def value(self, t, x) -> float:
        return float(self.basis(t, x) @ self.theta)

    def value_batch(self, ts, X) -> np.ndarray:
        return self.basis_batch(ts, X) @ self.theta

    def with_theta(self, theta) -> "LinearCritic":
        return LinearCritic(self.m, self.d, self.T, theta)

    # critic dump/restore shares the policy parameter-file format
    name = "linear-critic"

    @property
    def flat_params(self) -> np.ndarray:
        return self.theta.copy()

    def set_flat(self, flat) -> None:
        self.theta = np.asarray(flat, dtype=np.float64).reshape(self.W)

    def param_header(self) -> dict:
        return {"parametrization": self.name, "shapes": [[self.W]], "gamma": None, "d": self.d}

    # -- exact interval integrals -------------------------------------------

    def _power_integrals(self, t1s, t2s, kmax: int) -> np.ndarray:
        """I_k = int_{t1}^{t2} (1 - s/T)^k ds for k = 0..kmax, shape (B, kmax+1)."""
        u1 = 1.0 - np.asarray(t1s, dtype=np.float64) / self.T
        u2 = 1.0 - np.asarray(t2s, dtype=np.float64) / self.T
        ks = np.arange(kmax + 2, dtype=np.float64)
        diff = u1[..., None] ** ks - u2[..., None] ** ks
        return self.T * diff[..., 1:] / ks[1:]

    def _power_diffs(self, t1s, t2s, kmax: int) -> np.ndarray:
        """J_k = (1 - t1/T)^k - (1 - t2/T)^k for k = 0..kmax."""
        u1 = 1.0 - np.asarray(t1s, dtype=np.float64) / self.T
        u2 = 1.0 - np.asarray(t2s, dtype=np.float64) / self.T
        ks = np.arange(kmax + 1, dtype=np.float64)
        return u1[..., None] ** ks - u2[..., None] ** ks

    def D_bar(self, t1, t2, x) -> np.ndarray:
        """Exact int_{t1}^{t2} phi(s, x) phi(s, x)^T ds, shape (W, W)."""
        return self.sum_D_bar(np.array([t1]), np.array([t2]), np.asarray(x)[None, :])

    def sum_D_bar(self, t1s, t2s, X) -> np.ndarray:
        """Sum over intervals of D_bar; the batched workhorse for PE."""
        I = self._power_integrals(t1s, t2s, 2 * self.d)  # (B, 2d+1)
        P = I[:, self._lsum]  # (B, d+1, d+1)
        aug = self._aug(X)
        out = np.einsum("bi,bj,blk->iljk", aug, aug, P, optimize=True)
        return out.reshape(self.W, self.W)

    def b_bar(self, t1, t2, x) -> np.ndarray:
        """Exact int_{t1}^{t2} phi(s, x) ds, shape (W,)."""
        return self.b_bar_batch(np.array([t1]), np.array([t2]), np.asarray(x)[None, :])[0]

    def b_bar_batch(self, t1s, t2s, X) -> np.ndarray:
        I = self._power_integrals(t1s, t2s, self.d)
        aug = self._aug(X)
        return (aug[:, :, None] * I[:, None, :]).reshape(len(aug), self.W)

    def F_bar(self, t1, t2, x) -> np.ndarray:
        """Exact int_{t1}^{t2} phi(s, x) (d phi / d s)(s, x)^T ds."""
        return self.sum_F_bar(np.array([t1]), np.array([t2]), np.asarray(x)[None, :])

    def sum_F_bar(self, t1s, t2s, X) -> np.ndarray:
        J = self._power_diffs(t1s, t2s, 2 * self.d)  # (B, 2d+1)
        ls = np.arange(self.d + 1, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(self._lsum > 0, -ls[None, :] / np.maximum(self._lsum, 1), 0.0)
        G = J[:, self._lsum] * coef  # (B, d+1, d+1)
        aug = self._aug(X)
        out = np.einsum("bi,bj,blk->iljk", aug, aug, G, optimize=True)
        return out.reshape(self.W, self.W)


class MLPCritic:
    """Neural value approximation with normalized (t, x) inputs.

    Inputs are scaled to t/T and x_i / scale_i before the network; the scale
    is the initial capacity (or queue capacity), which keeps Adam stable.
    """

    def __init__(self, net: MLP, T: float, x_scale):
        self.net = net
        self.T = float(T)
        self.x_scale = np.maximum(np.asarray(x_scale, dtype=np.float64), 1.0)

    @classmethod
    def build(cls, m: int, hidden, T: float, x_scale, rng) -> "MLPCritic":
        return cls(MLP([1 + m, *hidden, 1], rng=rng), T, x_scale)

    def _inputs(self, ts, X) -> np.ndarray:
        ts = np.asarray(ts, dtype=np.float64)
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.concatenate([(ts / self.T)[:, None], X / self.x_scale], axis=1)

    def value(self, t, x) -> float:
        return float(self.value_batch(np.array([t]), np.asarray(x)[None, :])[0])

    def value_batch(self, ts, X) -> np.ndarray:
        return self.net.forward(self._inputs(ts, X))[:, 0]

    def value_and_grad(self, t, x):
        """Value and the gradient w.r.t. all network parameters."""
        out, grads = self.net.value_and_param_grad(self._inputs(np.array([t]), np.asarray(x)[None, :]), np.ones((1, 1)))
        return float(out[0, 0]), grads

    name = "mlp-critic"

    @property
    def flat_params(self) -> np.ndarray:
        return self.net.to_flat()

    def set_flat(self, flat) -> None:
        self.net.from_flat(flat)

    def param_header(self) -> dict:
        return {"parametrization": self.name, "shapes": [list(W.shape) for W, _ in self.net.params], "gamma": None, "d": None, "widths": list(self.net.widths)}

    def weighted_grad(self, ts, X, w):
        """Parameter gradients of ``sum_i w_i * J(t_i, x_i)``."""
        _, grads = self.net.value_and_param_grad(self._inputs(ts, X), np.asarray(w, dtype=np.float64)[:, None])
        return grads


def entropy_integral(policy, x, t1: float, t2: float, weight=None, order: int = DEFAULT_QUAD_ORDER):
    """Gauss-Legendre approximation of int_{t1}^{t2} w(s) H(pi(.|s, x)) ds.

    ``weight`` is ``None`` (constant 1), or a callable mapping an array of
    times (q,) to either scalars (q,) or vectors (q, W); the result is a
    scalar or a length-W vector accordingly.
    """
    if t2 <= t1:
        shape = None if weight is None else np.shape(weight(np.array([t1])))[1:]
        return 0.0 if not shape else np.zeros(shape)
    nodes, wts = quad_nodes(t1, t2, order)
    H = policy.entropy_batch(nodes, np.broadcast_to(np.asarray(x), (order, np.size(x))))
    if weight is None:
        return float(wts @ H)
    vals = np.asarray(weight(nodes), dtype=np.float64)
    if vals.ndim == 1:
        return float(wts @ (vals * H))
    return (wts * H) @ vals
