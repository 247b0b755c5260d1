"""Parametrized stochastic assortment policies.

Three learnable parametrizations share a common interface: a softmax over
all feasible assortments with pairwise-interaction scores (``LinearPairPolicy``),
a softmax over revenue-ordered assortments intersected with availability
(``LinearROPolicy``), and a factorized product-inclusion policy driven by a
neural net (``BernoulliNNPolicy``).  ``GreedyPolicy`` and
``UniformRandomPolicy`` are the static baselines.

Every policy implements:

- ``sample_batch(ts, X, avail, U)``: vectorized sampling from pre-drawn
  uniforms (the simulation engine's contract);
- ``log_prob`` / ``grad_log_prob`` and ``entropy`` / ``grad_entropy`` plus
  the batched weighted-sum variants the learning code consumes.

Scores always divide by the temperature ``gamma`` inside the exponent and are
max-shifted before exponentiation.
"""

from __future__ import annotations

import json

import numpy as np

from .model import NetworkInstance, assortment_revenue, mask_of, products_in

LN2 = float(np.log(2.0))

# keep per-call softmax tables under ~name x 2^n doubles
ENUM_TABLE_LIMIT = 15


def _popcount(masks) -> np.ndarray:
    return np.bitwise_count(np.asarray(masks, dtype=np.int64)).astype(np.int64)


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=1, keepdims=True)
    return shifted


def _entropy_rows(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0.0, probs * np.log(probs), 0.0)
    return -plogp.sum(axis=1)


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    return np.minimum((u[:, None] > cum).sum(axis=1), probs.shape[1] - 1)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class LinearPairPolicy:
    """Softmax over feasible assortments with pairwise product interactions.

    The score of assortment S at time t is a degree-d polynomial in
    (1 - t/T) whose coefficients sum the parameters phi[j, j', l] over all
    product pairs (j, j') contained in S; sampling, log-probabilities and
    entropies enumerate the 2^n assortment table, so this parametrization is
    limited to small product sets.
    """

    name = "linear-pair"
    uniforms_per_decision = 1

    def __init__(self, inst: NetworkInstance, d: int, gamma: float, phi=None):
        if inst.n > ENUM_TABLE_LIMIT:
            raise ValueError(f"pairwise softmax policy enumerates 2^n assortments; n={inst.n} is too large")
        if gamma <= 0:
            raise ValueError("temperature gamma must be positive")
        self.inst = inst
        self.n = inst.n
        self.d = int(d)
        self.T = inst.T
        self.gamma = float(gamma)
        self.masks = np.arange(1 << inst.n, dtype=np.int64)
        delta = ((self.masks[:, None] >> np.arange(inst.n)) & 1).astype(np.float64)
        self.pair_feats = (delta[:, :, None] * delta[:, None, :]).reshape(len(self.masks), inst.n * inst.n)
        self.enum_size = len(self.masks)
        self._phi = np.zeros((inst.n, inst.n, self.d + 1)) if phi is None else np.asarray(phi, dtype=np.float64).copy()
        if self._phi.shape != (inst.n, inst.n, self.d + 1):
            raise ValueError(f"phi must have shape {(inst.n, inst.n, self.d + 1)}")
        self._refresh()

    def _refresh(self):
        # scores_table[S, l]: pairwise parameter mass of S at time power l
        self._score_table = self.pair_feats @ self._phi.reshape(self.n * self.n, self.d + 1)

    @property
    def phi(self) -> np.ndarray:
        return self._phi

    @phi.setter
    def phi(self, value):
        self._phi = np.asarray(value, dtype=np.float64).reshape(self.n, self.n, self.d + 1).copy()
        self._refresh()

    def _upow(self, ts) -> np.ndarray:
        u = 1.0 - np.asarray(ts, dtype=np.float64) / self.T
        return u[:, None] ** np.arange(self.d + 1)

    def _probs(self, ts, avail) -> np.ndarray:
        scores = (self._upow(ts) @ self._score_table.T) / self.gamma
        feasible = (self.masks[None, :] & ~np.asarray(avail, dtype=np.int64)[:, None]) == 0
        scores[~feasible] = -np.inf
        return _softmax_rows(scores)

    def sample_batch(self, ts, X, avail, U) -> np.ndarray:
        probs = self._probs(ts, avail)
        return self.masks[_inverse_cdf(probs, U[:, 0])]

    def sample(self, t, x, rng) -> int:
        avail = self.inst.availability(x)
        u = rng.generator.uniform(size=(1, 1))
        return int(self.sample_batch(np.array([t]), np.asarray(x)[None, :], np.array([avail]), u)[0])

    def log_prob(self, t, x, S: int) -> float:
        avail = self.inst.availability(x)
        if S & ~avail:
            raise ValueError("assortment is not feasible at state x")
        probs = self._probs(np.array([t]), np.array([avail]))[0]
        return float(np.log(probs[S]))

    def grad_log_prob(self, t, x, S: int) -> np.ndarray:
        return self.grad_log_prob_weighted(np.array([t]), np.asarray(x)[None, :], np.array([S]), np.array([1.0]))

    def grad_log_prob_weighted(self, ts, X, Ss, w) -> np.ndarray:
        """sum_i w_i * grad_phi log pi(S_i | t_i, x_i), shape like phi."""
        ts = np.asarray(ts, dtype=np.float64)
        avail = self.inst.availability_batch(X)
        probs = self._probs(ts, avail)
        mean_feat = probs @ self.pair_feats
        diff = self.pair_feats[np.asarray(Ss, dtype=np.int64)] - mean_feat
        up = self._upow(ts) / self.gamma
        out = np.einsum("b,bf,bl->fl", np.asarray(w, dtype=np.float64), diff, up, optimize=True)
        return out.reshape(self.n, self.n, self.d + 1)

    def entropy(self, t, x) -> float:
        return float(self.entropy_batch(np.array([t]), np.asarray(x)[None, :])[0])

    def entropy_batch(self, ts, X) -> np.ndarray:
        avail = self.inst.availability_batch(X)
        return _entropy_rows(self._probs(np.asarray(ts, dtype=np.float64), avail))

    def grad_entropy(self, t, x) -> np.ndarray:
        return self.grad_entropy_weighted(np.array([t]), np.asarray(x)[None, :], np.array([1.0]))

    def grad_entropy_weighted(self, ts, X, w) -> np.ndarray:
        """sum_i w_i * grad_phi H(pi(. | t_i, x_i)), shape like phi."""
        ts = np.asarray(ts, dtype=np.float64)
        avail = self.inst.availability_batch(X)
        probs = self._probs(ts, avail)
        with np.errstate(divide="ignore", invalid="ignore"):
            logp = np.where(probs > 0.0, np.log(probs), 0.0)
        ent = -(probs * logp).sum(axis=1, keepdims=True)
        coeff = -probs * (logp + ent)  # centered: sums to zero per row
        feat_sum = coeff @ self.pair_feats
        up = self._upow(ts) / self.gamma
        out = np.einsum("b,bf,bl->fl", np.asarray(w, dtype=np.float64), feat_sum, up, optimize=True)
        return out.reshape(self.n, self.n, self.d + 1)

    @property
    def flat_params(self) -> np.ndarray:
        return self._phi.ravel().copy()

    def set_flat(self, flat) -> None:
        self.phi = np.asarray(flat, dtype=np.float64).reshape(self._phi.shape)

    def param_header(self) -> dict:
        return {"parametrization": self.name, "shapes": [list(self._phi.shape)], "gamma": self.gamma, "d": self.d}


def revenue_ordered_assortments(inst: NetworkInstance):
    """All unions of per-segment price-descending prefixes, as bitmasks.

    Within a segment products are sorted by price descending (ties by index)
    and every prefix, including the empty one, is a sub-assortment; the
    cartesian product over segments gives the n-bar revenue-ordered
    assortments.
    """
    import itertools

    seg_prefixes = []
    for seg in inst.choice.segments:
        order = sorted(seg.products, key=lambda j: (-inst.p[j], j))
        prefixes = [0]
        mask = 0
        for j in order:
            mask |= 1 << j
            prefixes.append(mask)
        seg_prefixes.append(prefixes)
    masks = [int(np.bitwise_or.reduce(np.array(combo, dtype=np.int64))) if combo else 0 for combo in itertools.product(*seg_prefixes)]
    return np.array(masks, dtype=np.int64)


class LinearROPolicy:
    """Softmax over revenue-ordered assortments, intersected with availability.

    An intermediate state-independent softmax sigma picks one of the n-bar
    revenue-ordered assortments; the offered set is its intersection with the
    currently available products, so the implemented probability of an
    assortment aggregates the sigma-mass of every revenue-ordered set mapping
    to it.
    """

    name = "linear-ro"
    uniforms_per_decision = 1

    def __init__(self, inst: NetworkInstance, d: int, gamma: float, phi=None):
        if gamma <= 0:
            raise ValueError("temperature gamma must be positive")
        self.inst = inst
        self.n = inst.n
        self.d = int(d)
        self.T = inst.T
        self.gamma = float(gamma)
        self.ro_masks = revenue_ordered_assortments(inst)
        self.n_bar = len(self.ro_masks)
        self.enum_size = self.n_bar
        self._phi = np.zeros((self.n_bar, self.d + 1)) if phi is None else np.asarray(phi, dtype=np.float64).copy()
        if self._phi.shape != (self.n_bar, self.d + 1):
            raise ValueError(f"phi must have shape {(self.n_bar, self.d + 1)}")

    @property
    def phi(self) -> np.ndarray:
        return self._phi

    @phi.setter
    def phi(self, value):
        self._phi = np.asarray(value, dtype=np.float64).reshape(self.n_bar, self.d + 1).copy()

    def _upow(self, ts) -> np.ndarray:
        u = 1.0 - np.asarray(ts, dtype=np.float64) / self.T
        return u[:, None] ** np.arange(self.d + 1)

    def _sigma(self, ts) -> np.ndarray:
        return _softmax_rows((self._upow(ts) @ self._phi.T) / self.gamma)

    def sample_batch(self, ts, X, avail, U) -> np.ndarray:
        ks = _inverse_cdf(self._sigma(np.asarray(ts, dtype=np.float64)), U[:, 0])
        return self.ro_masks[ks] & np.asarray(avail, dtype=np.int64)

    def sample(self, t, x, rng) -> int:
        avail = self.inst.availability(x)
        u = rng.generator.uniform(size=(1, 1))
        return int(self.sample_batch(np.array([t]), np.asarray(x)[None, :], np.array([avail]), u)[0])

    def log_prob(self, t, x, S: int) -> float:
        avail = self.inst.availability(x)
        sigma = self._sigma(np.array([t]))[0]
        mass = sigma[(self.ro_masks & avail) == S].sum()
        if mass <= 0.0:
            raise ValueError("assortment has zero probability under the revenue-ordered aggregation")
        return float(np.log(mass))

    def grad_log_prob(self, t, x, S: int) -> np.ndarray:
        return self.grad_log_prob_weighted(np.array([t]), np.asarray(x)[None, :], np.array([S]), np.array([1.0]))

    def grad_log_prob_weighted(self, ts, X, Ss, w) -> np.ndarray:
        ts = np.asarray(ts, dtype=np.float64)
        avail = self.inst.availability_batch(X)
        sigma = self._sigma(ts)
        member = (self.ro_masks[None, :] & avail[:, None]) == np.asarray(Ss, dtype=np.int64)[:, None]
        mass = (sigma * member).sum(axis=1)
        if np.any(mass <= 0.0):
            raise ValueError("observed assortment has zero probability under the revenue-ordered aggregation")
        coeff = sigma * (member / mass[:, None] - 1.0)
        up = self._upow(ts) / self.gamma
        return np.einsum("b,bk,bl->kl", np.asarray(w, dtype=np.float64), coeff, up, optimize=True)

    def _group_onehot(self, avail: int):
        offered = self.ro_masks & avail
        groups, inv = np.unique(offered, return_inverse=True)
        onehot = np.zeros((len(groups), self.n_bar))
        onehot[inv, np.arange(self.n_bar)] = 1.0
        return groups, inv, onehot

    def entropy(self, t, x) -> float:
        return float(self.entropy_batch(np.array([t]), np.asarray(x)[None, :])[0])

    def entropy_batch(self, ts, X) -> np.ndarray:
        ts = np.asarray(ts, dtype=np.float64)
        avail = self.inst.availability_batch(X)
        sigma = self._sigma(ts)
        out = np.empty(len(ts))
        for av in np.unique(avail):
            rows = avail == av
            _, _, onehot = self._group_onehot(int(av))
            out[rows] = _entropy_rows(sigma[rows] @ onehot.T)
        return out

    def grad_entropy(self, t, x) -> np.ndarray:
        return self.grad_entropy_weighted(np.array([t]), np.asarray(x)[None, :], np.array([1.0]))

    def grad_entropy_weighted(self, ts, X, w) -> np.ndarray:
        ts = np.asarray(ts, dtype=np.float64)
        avail = self.inst.availability_batch(X)
        sigma = self._sigma(ts)
        w = np.asarray(w, dtype=np.float64)
        up = self._upow(ts) / self.gamma
        out = np.zeros((self.n_bar, self.d + 1))
        for av in np.unique(avail):
            rows = np.nonzero(avail == av)[0]
            _, inv, onehot = self._group_onehot(int(av))
            mass = sigma[rows] @ onehot.T
            with np.errstate(divide="ignore", invalid="ignore"):
                logm = np.where(mass > 0.0, np.log(mass), 0.0)
            ent = -(mass * logm).sum(axis=1, keepdims=True)
            coeff = -sigma[rows] * (logm[:, inv] + ent)
            out += np.einsum("b,bk,bl->kl", w[rows], coeff, up[rows], optimize=True)
        return out

    @property
    def flat_params(self) -> np.ndarray:
        return self._phi.ravel().copy()

    def set_flat(self, flat) -> None:
        self.phi = np.asarray(flat, dtype=np.float64).reshape(self._phi.shape)

    def param_header(self) -> dict:
        return {"parametrization": self.name, "shapes": [list(self._phi.shape)], "gamma": self.gamma, "d": self.d}


class BernoulliNNPolicy:
    """Factorized assortment policy: independent inclusion per product.

    An actor network maps (t, x) to one logit per product; unavailable
    products are masked to logit -inf before the temperature-scaled sigmoid,
    so sampled assortments are always subsets of J(x) and the log-probability
    and entropy keep their factorized closed forms.
    """

    name = "bernoulli-nn"

    def __init__(self, inst: NetworkInstance, net, gamma: float):
        if gamma <= 0:
            raise ValueError("temperature gamma must be positive")
        self.inst = inst
        self.n = inst.n
        self.T = inst.T
        self.gamma = float(gamma)
        self.net = net
        if net.widths[0] != 1 + inst.m or net.widths[-1] != inst.n:
            raise ValueError(f"actor net must map {1 + inst.m} inputs to {inst.n} logits")
        self.uniforms_per_decision = inst.n
        self.enum_size = 1
        self._scale = np.maximum(inst.c.astype(np.float64), 1.0)

    @classmethod
    def build(cls, inst: NetworkInstance, hidden, gamma: float, rng) -> "BernoulliNNPolicy":
        from .tinynn import MLP

        return cls(inst, MLP([1 + inst.m, *hidden, inst.n], rng=rng, zero_output=True), gamma)

    def _inputs(self, ts, X) -> np.ndarray:
        ts = np.asarray(ts, dtype=np.float64)
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.concatenate([(ts / self.T)[:, None], X / self._scale], axis=1)

    def _offered_bits(self, avail) -> np.ndarray:
        return ((np.asarray(avail, dtype=np.int64)[:, None] >> np.arange(self.n)) & 1).astype(bool)

    def inclusion_probs(self, ts, X, avail) -> np.ndarray:
        z = self.net.forward(self._inputs(ts, X)) / self.gamma
        sig = _sigmoid(z)
        sig[~self._offered_bits(avail)] = 0.0
        return sig

    def sample_batch(self, ts, X, avail, U) -> np.ndarray:
        sig = self.inclusion_probs(ts, X, avail)
        bits = U < sig
        return bits @ (1 << np.arange(self.n, dtype=np.int64))

    def sample(self, t, x, rng) -> int:
        avail = self.inst.availability(x)
        u = rng.generator.uniform(size=(1, self.n))
        return int(self.sample_batch(np.array([t]), np.asarray(x)[None, :], np.array([avail]), u)[0])

    def log_prob(self, t, x, S: int) -> float:
        avail = self.inst.availability(x)
        if S & ~avail:
            return -np.inf
        sig = self.inclusion_probs(np.array([t]), np.asarray(x)[None, :], np.array([avail]))[0]
        offered = self._offered_bits(np.array([avail]))[0]
        inS = np.array([(S >> j) & 1 for j in range(self.n)], dtype=bool)
        with np.errstate(divide="ignore"):
            terms = np.where(inS, np.log(sig), np.log1p(-sig))
        return float(terms[offered].sum())

    def grad_log_prob(self, t, x, S: int):
        return self.grad_log_prob_weighted(np.array([t]), np.asarray(x)[None, :], np.array([S]), np.array([1.0]))

    def grad_log_prob_weighted(self, ts, X, Ss, w):
        """Weighted score-function gradient w.r.t. the actor-net parameters."""
        ts = np.asarray(ts, dtype=np.float64)
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        avail = self.inst.availability_batch(X)
        inp = self._inputs(ts, X)
        out, acts = self.net.forward_cached(inp)
        sig = _sigmoid(out / self.gamma)
        offered = self._offered_bits(avail)
        inS = ((np.asarray(Ss, dtype=np.int64)[:, None] >> np.arange(self.n)) & 1).astype(np.float64)
        G = np.where(offered, (inS - sig) / self.gamma, 0.0) * np.asarray(w, dtype=np.float64)[:, None]
        return self.net.backward(acts, G)

    def entropy(self, t, x) -> float:
        return float(self.entropy_batch(np.array([t]), np.asarray(x)[None, :])[0])

    def entropy_batch(self, ts, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        avail = self.inst.availability_batch(X)
        sig = self.inclusion_probs(ts, X, avail)
        offered = self._offered_bits(avail)
        with np.errstate(divide="ignore", invalid="ignore"):
            h = np.where((sig > 0.0) & (sig < 1.0), -(sig * np.log(sig) + (1 - sig) * np.log1p(-sig)), 0.0)
        return (h * offered).sum(axis=1)

    def grad_entropy(self, t, x):
        return self.grad_entropy_weighted(np.array([t]), np.asarray(x)[None, :], np.array([1.0]))

    def grad_entropy_weighted(self, ts, X, w):
        ts = np.asarray(ts, dtype=np.float64)
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        avail = self.inst.availability_batch(X)
        inp = self._inputs(ts, X)
        out, acts = self.net.forward_cached(inp)
        sig = _sigmoid(out / self.gamma)
        offered = self._offered_bits(avail)
        with np.errstate(divide="ignore", invalid="ignore"):
            dh = np.where((sig > 0.0) & (sig < 1.0), sig * (1 - sig) * (np.log1p(-sig) - np.log(sig)) / self.gamma, 0.0)
        G = np.where(offered, dh, 0.0) * np.asarray(w, dtype=np.float64)[:, None]
        return self.net.backward(acts, G)

    @property
    def flat_params(self) -> np.ndarray:
        return self.net.to_flat()

    def set_flat(self, flat) -> None:
        self.net.from_flat(flat)

    def param_header(self) -> dict:
        return {
            "parametrization": self.name,
            "shapes": [list(W.shape) for W, _ in self.net.params],
            "gamma": self.gamma,
            "d": None,
            "widths": list(self.net.widths),
        }


def greedy_assortment(inst: NetworkInstance, x) -> int:
    """Feasible assortment maximizing expected revenue per customer.

    Exploits segment separability: R(S) decomposes across disjoint
    consideration sets, and within a segment the optimum is a price-ordered
    prefix of the available products.
    """
    avail = inst.availability(x)
    total = 0
    for seg in inst.choice.segments:
        order = sorted((j for j in seg.products if (avail >> j) & 1), key=lambda j: (-inst.p[j], j))
        best_val, best_mask = 0.0, 0
        mask = 0
        num = 0.0
        den = seg.no_purchase_weight
        wmap = dict(zip(seg.products, seg.weights))
        for j in order:
            mask |= 1 << j
            num += inst.p[j] * wmap[j]
            den += wmap[j]
            val = seg.share * num / den
            if val > best_val + 1e-15:
                best_val, best_mask = val, mask
        total |= best_mask
    return total


class GreedyPolicy:
    """Deterministic policy offering the myopically best feasible assortment."""

    name = "greedy"
    uniforms_per_decision = 0
    enum_size = 1

    def __init__(self, inst: NetworkInstance):
        self.inst = inst
        self.n = inst.n
        self._cache: dict[int, int] = {}

    def _best_for(self, avail: int, x) -> int:
        got = self._cache.get(avail)
        if got is None:
            got = greedy_assortment(self.inst, x)
            self._cache[avail] = got
        return got

    def sample_batch(self, ts, X, avail, U) -> np.ndarray:
        avail = np.asarray(avail, dtype=np.int64)
        out = np.empty(len(avail), dtype=np.int64)
        for av in np.unique(avail):
            rows = avail == av
            out[rows] = self._best_for(int(av), np.asarray(X)[np.argmax(rows)])
        return out

    def sample(self, t, x, rng=None) -> int:
        return self._best_for(self.inst.availability(x), x)

    def entropy(self, t, x) -> float:
        return 0.0

    def entropy_batch(self, ts, X) -> np.ndarray:
        return np.zeros(len(np.atleast_1d(ts)))


class UniformRandomPolicy:
    """Uniform distribution over all feasible assortments at each state."""

    name = "uniform-random"

    def __init__(self, inst: NetworkInstance):
        self.inst = inst
        self.n = inst.n
        self.uniforms_per_decision = inst.n
        self.enum_size = 1

    def sample_batch(self, ts, X, avail, U) -> np.ndarray:
        # each available product tossed in independently with prob 1/2 is
        # exactly uniform over the 2^|J(x)| feasible assortments
        avail = np.asarray(avail, dtype=np.int64)
        offered = ((avail[:, None] >> np.arange(self.n)) & 1).astype(bool)
        bits = (U < 0.5) & offered
        return bits @ (1 << np.arange(self.n, dtype=np.int64))

    def sample(self, t, x, rng) -> int:
        avail = self.inst.availability(x)
        u = rng.generator.uniform(size=(1, self.n))
        return int(self.sample_batch(np.array([t]), np.asarray(x)[None, :], np.array([avail]), u)[0])

    def log_prob(self, t, x, S: int) -> float:
        avail = self.inst.availability(x)
        if S & ~avail:
            raise ValueError("assortment is not feasible at state x")
        return -float(_popcount([avail])[0]) * LN2

    def entropy(self, t, x) -> float:
        return float(_popcount([self.inst.availability(x)])[0]) * LN2

    def entropy_batch(self, ts, X) -> np.ndarray:
        avail = self.inst.availability_batch(np.atleast_2d(X))
        return _popcount(avail).astype(np.float64) * LN2


# ---------------------------------------------------------------------------
# parameter files: flat array with a JSON header


def save_policy_params(path, policy) -> None:
    np.savez(path, header=json.dumps(policy.param_header()), params=policy.flat_params)


def load_policy_params(path, policy) -> None:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header["parametrization"] != policy.name:
            raise ValueError(f"parameter file holds {header['parametrization']!r}, policy is {policy.name!r}")
        policy.set_flat(data["params"])
