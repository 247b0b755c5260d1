"""Problem-instance data model for choice-based network revenue management.

A :class:`NetworkInstance` bundles the network structure (consumption matrix,
prices, capacities, horizon), the arrival-rate function and a segmented MNL
choice model.  Assortments are plain python ints interpreted as bitmasks over
the products ``0..n-1``; states are integer numpy vectors of remaining
inventory.  All objects are immutable after construction and safe to share
across threads.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

NO_PURCHASE = -1

# exhaustive enumeration of assortments / states is refused above this
ENUMERATION_LIMIT = 20

# bitmask assortments; larger product sets would need multi-word masks
MAX_PRODUCTS = 64

PROB_TOL = 1e-12


class ValidationError(ValueError):
    """Raised when instance data violates a structural requirement."""


# ---------------------------------------------------------------------------
# arrival-rate functions


@dataclass(frozen=True)
class Constant:
    """Stationary arrival rate."""

    rate: float

    def evaluate(self, t):
        return np.broadcast_to(np.float64(self.rate), np.shape(t)).copy() if np.ndim(t) else float(self.rate)

    @property
    def lambda_max(self) -> float:
        return float(self.rate)

    def validate(self, horizon: float) -> None:
        if self.rate < 0:
            raise ValidationError(f"arrival rate must be >= 0, got {self.rate}")


@dataclass(frozen=True)
class PiecewiseConstant:
    """Rate ``rates[i]`` on ``[breakpoints[i], breakpoints[i+1])``."""

    breakpoints: tuple
    rates: tuple

    def __post_init__(self):
        object.__setattr__(self, "breakpoints", tuple(float(b) for b in self.breakpoints))
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))

    def evaluate(self, t):
        idx = np.clip(np.searchsorted(self.breakpoints, t, side="right") - 1, 0, len(self.rates) - 1)
        out = np.asarray(self.rates, dtype=np.float64)[idx]
        return out if np.ndim(t) else float(out)

    @property
    def lambda_max(self) -> float:
        return float(max(self.rates))

    def validate(self, horizon: float) -> None:
        if len(self.breakpoints) != len(self.rates) + 1:
            raise ValidationError("piecewise rate needs len(breakpoints) == len(rates) + 1")
        if any(b2 <= b1 for b1, b2 in zip(self.breakpoints, self.breakpoints[1:])):
            raise ValidationError("breakpoints must be strictly increasing")
        if min(self.rates) < 0:
            raise ValidationError("rates must be >= 0")
        if self.breakpoints[0] > 0 or self.breakpoints[-1] < horizon:
            raise ValidationError("breakpoints must cover [0, T]")


@dataclass(frozen=True)
class Sinusoidal:
    """``base + amplitude * sin(2*pi*t / period)``."""

    base: float
    amplitude: float
    period: float

    def evaluate(self, t):
        out = self.base + self.amplitude * np.sin(2.0 * np.pi * np.asarray(t, dtype=np.float64) / self.period)
        return out if np.ndim(t) else float(out)

    @property
    def lambda_max(self) -> float:
        return float(self.base + abs(self.amplitude))

    def validate(self, horizon: float) -> None:
        if self.period <= 0:
            raise ValidationError("period must be positive")
        if self.base - abs(self.amplitude) < 0:
            raise ValidationError("sinusoidal rate dips below zero")


@dataclass(frozen=True)
class LinearRamp:
    """Linear interpolation from ``start`` at t=0 to ``end`` at t=duration."""

    start: float
    end: float
    duration: float

    def evaluate(self, t):
        frac = np.clip(np.asarray(t, dtype=np.float64) / self.duration, 0.0, 1.0)
        out = self.start + (self.end - self.start) * frac
        return out if np.ndim(t) else float(out)

    @property
    def lambda_max(self) -> float:
        return float(max(self.start, self.end))

    def validate(self, horizon: float) -> None:
        if self.duration <= 0:
            raise ValidationError("duration must be positive")
        if min(self.start, self.end) < 0:
            raise ValidationError("ramp rate must stay >= 0")


# ---------------------------------------------------------------------------
# choice model


@dataclass(frozen=True)
class Segment:
    share: float
    products: tuple
    weights: tuple
    no_purchase_weight: float


class SegmentedMNL:
    """Disjoint-segment multinomial-logit choice model.

    A customer belongs to segment ``l`` with probability ``share_l`` and then
    chooses among the offered products of its consideration set with MNL
    probabilities.  Shares are stored normalized so that the arrival-rate
    function carries all time scaling.  A single segment with share 1 is the
    plain MNL model.
    """

    def __init__(self, segments):
        segments = [
            Segment(float(s.share), tuple(int(j) for j in s.products), tuple(float(w) for w in s.weights), float(s.no_purchase_weight))
            if isinstance(s, Segment)
            else Segment(float(s[0]), tuple(int(j) for j in s[1]), tuple(float(w) for w in s[2]), float(s[3]))
            for s in segments
        ]
        total = sum(s.share for s in segments)
        if total <= 0:
            raise ValidationError("segment shares must sum to a positive value")
        if abs(total - 1.0) > 1e-9:
            warnings.warn(f"segment shares sum to {total:.6g}; renormalizing to 1", stacklevel=2)
        segments = [Segment(s.share / total, s.products, s.weights, s.no_purchase_weight) for s in segments]

        seen = set()
        for s in segments:
            if len(s.products) != len(s.weights):
                raise ValidationError("segment products and weights must have equal length")
            if any(w <= 0 for w in s.weights) or s.no_purchase_weight <= 0:
                raise ValidationError("MNL weights must be strictly positive")
            overlap = seen.intersection(s.products)
            if overlap:
                raise ValidationError(f"consideration sets must be pairwise disjoint; product(s) {sorted(overlap)} repeated")
            seen.update(s.products)

        self.segments = tuple(segments)
        self.n = 1 + max(seen) if seen else 0
        if seen and sorted(seen) != list(range(self.n)):
            raise ValidationError("consideration sets must cover products 0..n-1 without gaps")
        if self.n > MAX_PRODUCTS:
            raise ValidationError(f"at most {MAX_PRODUCTS} products supported by the bitmask representation")

        # flat per-product arrays for vectorized evaluation
        self._seg_of = np.zeros(self.n, dtype=np.int64)
        self._v = np.zeros(self.n, dtype=np.float64)
        for li, s in enumerate(segments):
            for j, w in zip(s.products, s.weights):
                self._seg_of[j] = li
                self._v[j] = w
        self._shares = np.array([s.share for s in segments], dtype=np.float64)
        self._v0 = np.array([s.no_purchase_weight for s in segments], dtype=np.float64)
        self._seg_onehot = np.zeros((len(segments), self.n), dtype=np.float64)
        self._seg_onehot[self._seg_of, np.arange(self.n)] = 1.0
        for arr in (self._seg_of, self._v, self._shares, self._v0, self._seg_onehot):
            arr.setflags(write=False)

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    def offered_matrix(self, masks) -> np.ndarray:
        """(B, n) 0/1 indicator of which products each bitmask offers."""
        masks = np.asarray(masks, dtype=np.int64)
        return ((masks[:, None] >> np.arange(self.n)) & 1).astype(np.float64)

    def purchase_probs(self, masks) -> np.ndarray:
        """Per-product purchase probabilities for a batch of assortments.

        Returns a (B, n+1) array; column ``n`` is the no-purchase probability.
        """
        offered = self.offered_matrix(masks)
        w = offered * self._v
        denom = w @ self._seg_onehot.T + self._v0  # (B, n_segments)
        probs = self._shares[self._seg_of] * w / denom[:, self._seg_of]
        out = np.empty((probs.shape[0], self.n + 1), dtype=np.float64)
        out[:, : self.n] = probs
        out[:, self.n] = 1.0 - probs.sum(axis=1)
        return out


def choice_prob(choice: SegmentedMNL, assortment: int, j: int) -> float:
    """P_j(S) for product ``j`` (0-based), or P_0(S) when ``j == NO_PURCHASE``."""
    if j == NO_PURCHASE:
        probs = choice.purchase_probs([assortment])[0]
        return float(probs[choice.n])
    if not 0 <= j < choice.n or not (assortment >> j) & 1:
        raise ValueError(f"product {j} is not in the offered assortment")
    return float(choice.purchase_probs([assortment])[0, j])


# ---------------------------------------------------------------------------
# network instance


class NetworkInstance:
    """Immutable problem instance.

    Parameters
    ----------
    A : (m, n) nonnegative integer consumption matrix; column j (``A[:, j]``)
        is the resource bundle consumed by one sale of product j.
    p : length-n positive price vector.
    c : length-m nonnegative integer initial capacities.
    T : horizon length.
    arrival : arrival-rate function with ``evaluate``/``lambda_max``.
    choice : :class:`SegmentedMNL` over products ``0..n-1``.
    """

    def __init__(self, A, p, c, T, arrival, choice: SegmentedMNL):
        A = np.asarray(A, dtype=np.int64)
        p = np.asarray(p, dtype=np.float64)
        c = np.asarray(c, dtype=np.int64)
        if A.ndim != 2:
            raise ValidationError("A must be a 2-d matrix")
        m, n = A.shape
        if p.shape != (n,) or c.shape != (m,):
            raise ValidationError("p must have length n and c length m")
        if np.any(A < 0):
            raise ValidationError("consumption matrix must be nonnegative")
        if np.any(A.sum(axis=0) == 0):
            raise ValidationError("every product must consume at least one resource unit")
        if np.any(p <= 0):
            raise ValidationError("prices must be strictly positive")
        if np.any(c < 0):
            raise ValidationError("capacities must be nonnegative")
        if T <= 0:
            raise ValidationError("horizon must be positive")
        if choice.n != n:
            raise ValidationError(f"choice model covers {choice.n} products, instance has {n}")
        arrival.validate(float(T))

        self.A = A
        self.p = p
        self.c = c
        self.T = float(T)
        self.m = m
        self.n = n
        self.arrival = arrival
        self.choice = choice
        self._cols = A.T.copy()  # (n, m)
        for arr in (self.A, self.p, self.c, self._cols):
            arr.setflags(write=False)

    def availability(self, x) -> int:
        """Bitmask of products affordable at state ``x`` (the set J(x))."""
        x = np.asarray(x)
        ok = np.all(x[None, :] >= self._cols, axis=1)
        return int(np.bitwise_or.reduce(np.where(ok, 1 << np.arange(self.n, dtype=np.int64), 0)))

    def availability_batch(self, X) -> np.ndarray:
        """(B,) int64 availability bitmasks for states ``X`` of shape (B, m)."""
        X = np.asarray(X)
        ok = np.all(X[:, None, :] >= self._cols[None, :, :], axis=2)
        return ok @ (1 << np.arange(self.n, dtype=np.int64))

    def state_count(self) -> int:
        return int(np.prod(self.c + 1))


def products_in(mask: int):
    """Product indices contained in an assortment bitmask, ascending."""
    out = []
    j = 0
    while mask:
        if mask & 1:
            out.append(j)
        mask >>= 1
        j += 1
    return out


def mask_of(products) -> int:
    mask = 0
    for j in products:
        mask |= 1 << int(j)
    return mask


def assortment_revenue(choice: SegmentedMNL, p: np.ndarray, mask: int) -> float:
    """Expected revenue per arriving customer, R(S) = sum_j p_j P_j(S)."""
    probs = choice.purchase_probs([mask])[0, : choice.n]
    return float(probs @ p)


def reward_rate(inst: NetworkInstance, t: float, mask: int) -> float:
    """Instantaneous revenue rate lambda(t) * sum_j p_j P_j(S)."""
    return float(inst.arrival.evaluate(t)) * assortment_revenue(inst.choice, inst.p, mask)


def transition_rate(inst: NetworkInstance, t: float, x, mask: int, y) -> float:
    """Controlled jump rate q(y | t, x, S); diagonal entry for ``y == x``."""
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if mask & ~inst.availability(x):
        raise ValueError("assortment is not feasible at state x")
    lam = float(inst.arrival.evaluate(t))
    probs = inst.choice.purchase_probs([mask])[0]
    if np.array_equal(x, y):
        return -lam * (1.0 - probs[inst.n])
    diff = x - y
    rate = 0.0
    for j in products_in(mask):
        if np.array_equal(inst._cols[j], diff):
            rate += lam * probs[j]
    return rate


def hamiltonian(inst: NetworkInstance, t: float, x, mask: int, value_fn) -> float:
    """r(S) + sum_y v(t, y) q(y | t, x, S) in shadow-price form.

    ``value_fn(t, y)`` is evaluated only at ``x`` and the post-sale states
    ``x - A^j`` for offered products, never over the whole state space.
    """
    x = np.asarray(x, dtype=np.int64)
    if mask & ~inst.availability(x):
        raise ValueError("assortment is not feasible at state x")
    lam = float(inst.arrival.evaluate(t))
    probs = inst.choice.purchase_probs([mask])[0]
    vx = value_fn(t, x)
    total = 0.0
    for j in products_in(mask):
        total += (value_fn(t, x - inst._cols[j]) - vx + inst.p[j]) * lam * probs[j]
    return float(total)


def feasible_assortments(inst: NetworkInstance, x):
    """Iterate over all feasible assortment bitmasks at state ``x``.

    The feasible set is exactly the power set of J(x).  Refuses instances
    above the exhaustive-enumeration limit; large instances must use a
    factorized policy representation instead.
    """
    if inst.n > ENUMERATION_LIMIT:
        raise ValueError(f"n={inst.n} exceeds the enumeration limit ({ENUMERATION_LIMIT}); use a factorized policy")
    avail = inst.availability(x)
    return subsets_of(avail)


def subsets_of(mask: int):
    """All submasks of ``mask`` in ascending bitmask order (including 0)."""
    bits = [1 << j for j in products_in(mask)]
    for r in range(len(bits) + 1):
        for combo in itertools.combinations(bits, r):
            yield sum(combo)


def all_submasks_sorted(mask: int) -> np.ndarray:
    """Sorted int64 array of all submasks of ``mask``."""
    return np.sort(np.fromiter(subsets_of(mask), dtype=np.int64))


def enumerate_states(c) -> np.ndarray:
    """All inventory vectors 0 <= x <= c, shape (prod(c+1), m)."""
    c = np.asarray(c, dtype=np.int64)
    grids = np.meshgrid(*[np.arange(ci + 1) for ci in c], indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def state_index(c) -> "tuple[np.ndarray, callable]":
    """Mixed-radix encoder for states: returns (all_states, encode)."""
    c = np.asarray(c, dtype=np.int64)
    radix = np.concatenate([np.cumprod((c + 1)[::-1])[::-1][1:], [1]])

    def encode(X):
        return np.asarray(X, dtype=np.int64) @ radix

    return enumerate_states(c), encode
