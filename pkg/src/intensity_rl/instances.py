"""Built-in problem instances used by the test-suite and the docs.

``small_network``: 2 resources / 3 products, single-segment MNL, T=15.
``airline_network``: 6 flight legs / 9 itineraries over a two-leg hub line,
three demand segments, T=200.
``bursty_network``: 3 resources / 7 products with a piecewise-constant
arrival surge, used for the continuous- vs discrete-time comparison.
``admission_queue``: single-server admission control with sinusoidal
arrivals and ramping service rate.
"""

from __future__ import annotations

import numpy as np

from .model import Constant, NetworkInstance, PiecewiseConstant, Segment, SegmentedMNL, Sinusoidal, LinearRamp
from .queueing import QueueInstance


def small_network() -> NetworkInstance:
    A = [[1, 0, 1], [0, 1, 1]]
    p = [1.0, 1.0, 1.5]
    c = [5, 5]
    choice = SegmentedMNL([Segment(1.0, (0, 1, 2), (42.0, 42.0, 55.0), 27.8)])
    return NetworkInstance(A, p, c, T=15.0, arrival=Constant(0.9), choice=choice)


def airline_network() -> NetworkInstance:
    # legs 1..6: A->H morning/afternoon/evening, then H->B likewise;
    # products 1-3 use one A->H leg, 4-6 one H->B leg, 7-9 a connecting pair
    A = np.zeros((6, 9), dtype=int)
    for j, legs in enumerate([(0,), (1,), (2,), (3,), (4,), (5,), (0, 3), (1, 4), (2, 5)]):
        for i in legs:
            A[i, j] = 1
    p = [8, 10, 6, 8, 10, 6, 9, 12, 7]
    c = [12, 20, 16, 20, 12, 16]
    choice = SegmentedMNL(
        [
            Segment(0.25, (0, 1, 2), (5.0, 10.0, 1.0), 1.0),
            Segment(0.25, (3, 4, 5), (5.0, 10.0, 1.0), 1.0),
            Segment(0.50, (6, 7, 8), (5.0, 1.0, 10.0), 5.0),
        ]
    )
    return NetworkInstance(A, p, c, T=200.0, arrival=Constant(0.8), choice=choice)


def bursty_network() -> NetworkInstance:
    A = [
        [1, 1, 0, 1, 1, 0, 0],
        [1, 1, 1, 0, 0, 1, 0],
        [1, 0, 1, 1, 0, 0, 1],
    ]
    p = [800.0, 100.0, 100.0, 100.0, 10.0, 10.0, 10.0]
    c = [4, 4, 4]
    choice = SegmentedMNL([Segment(1.0, tuple(range(7)), (0.02, 1.0, 1.0, 1.0, 10.0, 10.0, 10.0), 1.0)])
    arrival = PiecewiseConstant(breakpoints=(0.0, 7.5, 8.0, 10.0), rates=(0.5, 50.0, 0.5))
    return NetworkInstance(A, p, c, T=10.0, arrival=arrival, choice=choice)


def admission_queue() -> QueueInstance:
    return QueueInstance(
        capacity=10,
        T=20.0,
        admission_reward=10.0,
        holding_cost=1.0,
        terminal_penalty=0.1,
        arrival=Sinusoidal(base=0.5, amplitude=0.3, period=20.0),
        service=LinearRamp(start=0.1, end=0.2, duration=20.0),
    )


BUILDERS = {
    "small-network": small_network,
    "airline-network": airline_network,
    "bursty-network": bursty_network,
}
