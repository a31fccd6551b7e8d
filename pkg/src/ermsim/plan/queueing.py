"""Erlang-C waiting times and allocation action-space counting."""
from __future__ import annotations

import math

from ..errors import InvalidArgument


def action_space_size(num_responders: int, num_waiting_cells: int) -> int:
    """Ordered injective assignments of responders to waiting cells, |V|! / (|V| - |R|)!."""
    if num_responders < 0 or num_waiting_cells < 0:
        raise InvalidArgument("counts must be non-negative")
    if num_responders > num_waiting_cells:
        raise InvalidArgument(f"{num_responders} responders cannot fill {num_waiting_cells} cells injectively")
    return math.perm(num_waiting_cells, num_responders)


def erlang_c(offered_load: float, servers: int) -> float:
    """Probability an arrival waits in an M/M/c queue, via the Erlang-B recursion."""
    if servers <= 0:
        return 1.0
    if offered_load >= servers:
        return 1.0
    b = 1.0
    for k in range(1, servers + 1):
        b = offered_load * b / (k + offered_load * b)
    return servers * b / (servers - offered_load * (1.0 - b))


def estimate_wait(lam: float, mu: float, c: int) -> float:
    """Expected M/M/c queueing delay in hours (``inf`` when the queue is unstable).

    ``lam`` and ``mu`` are arrivals and services per hour; ``c`` is the number
    of servers.
    """
    if not mu > 0:
        raise InvalidArgument(f"service rate must be positive, got {mu}")
    if lam < 0 or c < 0:
        raise InvalidArgument("arrival rate and servers must be non-negative")
    if lam == 0:
        return 0.0
    if c == 0 or lam >= c * mu:
        return math.inf
    return erlang_c(lam / mu, c) / (c * mu - lam)
