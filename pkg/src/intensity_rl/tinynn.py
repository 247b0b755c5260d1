"""Minimal fully connected network with ReLU hidden layers, plus Adam.

Forward/backward operate on batches: inputs are (B, in_dim) and output
cotangents (B, out_dim); ``backward`` returns parameter gradients summed over
the batch, which is exactly what the batch-averaged update rules need.
"""

from __future__ import annotations

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class MLP:
    """Fully connected net: ReLU on hidden layers, identity output.

    ``zero_output`` zeroes the final layer, so the initial map is identically
    zero while hidden features are informative; policy nets use this to start
    at the maximum-entropy policy.
    """

    def __init__(self, widths, rng=None, params=None, zero_output=False):
        self.widths = tuple(int(w) for w in widths)
        if len(self.widths) < 2:
            raise ValueError("need at least input and output widths")
        if params is not None:
            self.params = [(np.array(W, dtype=np.float64), np.array(b, dtype=np.float64)) for W, b in params]
        else:
            gen = rng.generator if hasattr(rng, "generator") else (rng or np.random.default_rng())
            self.params = []
            for w_in, w_out in zip(self.widths, self.widths[1:]):
                limit = np.sqrt(6.0 / w_in)  # He-uniform for ReLU
                W = gen.uniform(-limit, limit, size=(w_in, w_out))
                self.params.append((W, np.zeros(w_out)))
            if zero_output:
                W, b = self.params[-1]
                self.params[-1] = (np.zeros_like(W), b)
        expected = list(zip(self.widths, self.widths[1:]))
        shapes = [W.shape for W, _ in self.params]
        if shapes != expected:
            raise ValueError(f"parameter shapes {shapes} do not match widths {self.widths}")

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in self.params)

    def forward(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        h = X
        last = len(self.params) - 1
        for i, (W, b) in enumerate(self.params):
            h = h @ W + b
            if i != last:
                np.maximum(h, 0.0, out=h)
        return h

    def forward_cached(self, X):
        """Forward pass keeping pre-activation caches for ``backward``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        acts = [X]
        h = X
        last = len(self.params) - 1
        for i, (W, b) in enumerate(self.params):
            z = h @ W + b
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, G):
        """Parameter gradients of ``sum(G * output)``, summed over the batch.

        ``acts`` is the cache from :meth:`forward_cached`; ``G`` is the
        (B, out_dim) cotangent of the output.
        """
        G = np.atleast_2d(np.asarray(G, dtype=np.float64))
        grads = [None] * len(self.params)
        delta = G
        for i in range(len(self.params) - 1, -1, -1):
            W, _ = self.params[i]
            a_in = acts[i]
            grads[i] = (a_in.T @ delta, delta.sum(axis=0))
            if i > 0:
                delta = (delta @ W.T) * (acts[i] > 0.0)
        return grads

    def value_and_param_grad(self, X, G):
        out, acts = self.forward_cached(X)
        return out, self.backward(acts, G)

    def to_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.params])

    def from_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.size}")
        pos = 0
        new = []
        for W, b in self.params:
            w = flat[pos : pos + W.size].reshape(W.shape)
            pos += W.size
            bb = flat[pos : pos + b.size].copy()
            pos += b.size
            new.append((w, bb))
        self.params = new

    def copy(self) -> "MLP":
        return MLP(self.widths, params=self.params)


class AdamState:
    """Bias-corrected Adam over a list of parameter arrays."""

    def __init__(self, shapes, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls([np.shape(p) for p in params], **kw)


def adam_step(state: AdamState, params, grads, lr: float):
    """One minimizing Adam step; returns the updated parameter list."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1**state.t)
        v_hat = state.v[i] / (1 - b2**state.t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def adam_step_mlp(state: AdamState, net: MLP, grads, lr: float) -> None:
    """Adam step applied in place to an MLP's (W, b) parameter pairs."""
    flat_params = [a for Wb in net.params for a in Wb]
    flat_grads = [a for Wb in grads for a in Wb]
    updated = adam_step(state, flat_params, flat_grads, lr)
    net.params = [(updated[2 * i], updated[2 * i + 1]) for i in range(len(net.params))]
