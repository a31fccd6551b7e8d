"""Open-loop UCT search over move-one-or-hold relocation actions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import InvalidArgument
from ..geo import CellId
from ..sim import EN_ROUTE, SERVICING, Allocation, Snapshot
from .model import WAITING, PlanningModel, apply_move, sample_incidents, simulate_epoch, state_from_views

Action = tuple[int, CellId] | None  # (index into the search state, target cell); None holds


@dataclass(frozen=True)
class MCTSConfig:
    iterations: int = 5000
    uct_c: float = math.sqrt(2.0)
    horizon_epochs: int = 4
    gamma: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise InvalidArgument("iterations must be >= 1")
        if not self.uct_c > 0:
            raise InvalidArgument("uct_c must be positive")
        if self.horizon_epochs < 1:
            raise InvalidArgument("horizon_epochs must be >= 1")
        if not 0 < self.gamma <= 1:
            raise InvalidArgument("gamma must be in (0, 1]")


@dataclass
class Tree:
    """Flat node storage. Node 0 is the root; ``children[n][a]`` is the node for action ``a``."""

    actions: list[Action]
    children: list[list[int]] = field(default_factory=list)
    visits: list[int] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    total_sq: list[float] = field(default_factory=list)
    rollouts: list[int] = field(default_factory=list)
    depth: list[int] = field(default_factory=list)
    lo: float = math.inf
    hi: float = -math.inf

    def add(self, depth: int) -> int:
        self.children.append([])
        self.visits.append(0)
        self.total.append(0.0)
        self.total_sq.append(0.0)
        self.rollouts.append(0)
        self.depth.append(depth)
        return len(self.visits) - 1

    def value(self, node: int) -> float:
        n = self.visits[node]
        return self.total[node] / n if n else 0.0

    def std_err(self, node: int) -> float:
        n = self.visits[node]
        if n < 2:
            return math.inf
        mean = self.total[node] / n
        var = max(0.0, self.total_sq[node] / n - mean * mean) * n / (n - 1)
        return math.sqrt(var / n)

    def root_stats(self) -> list[tuple[Action, int, float]]:
        return [(self.actions[a], self.visits[c], self.value(c)) for a, c in enumerate(self.children[0])]

    def best_root_action(self) -> int:
        best, best_n = 0, -1
        for a, c in enumerate(self.children[0]):
            if self.visits[c] > best_n:
                best, best_n = a, self.visits[c]
        return best


def _select(tree: Tree, node: int, c: float) -> int:
    kids = tree.children[node]
    log_n = math.log(tree.visits[node])
    span = tree.hi - tree.lo
    best, best_score = 0, -math.inf
    for a, child in enumerate(kids):
        q = tree.total[child] / tree.visits[child]
        qn = (q - tree.lo) / span if span > 0 else 0.0
        score = qn + c * math.sqrt(log_n / tree.visits[child])
        if score > best_score:
            best, best_score = a, score
    return best


def _legal(state: list[list], action: Action, capacity: int | None) -> bool:
    if action is None or capacity is None:
        return True
    i, cell = action
    if state[i][WAITING] == cell:
        return True
    return sum(1 for st in state if st[WAITING] == cell) < capacity


def search(
    model: PlanningModel,
    state: list[list],
    actions: Sequence[Action],
    clock: float,
    pending: Sequence[tuple[float, CellId, float]],
    cfg: MCTSConfig,
    rng: np.random.Generator,
    cells: Sequence[CellId] | None = None,
) -> Tree:
    """Run ``cfg.iterations`` UCT iterations from ``state`` and return the tree.

    Actions are expanded in index order, so index 0 (hold) is tried first. A
    node's value is the mean discounted return from its epoch onward, and a
    freshly expanded leaf is valued by holding the allocation for the rest
    of the horizon.
    """
    grid, T, E, H, gamma = model.grid, model.grid.travel_rows, model.epoch_seconds, cfg.horizon_epochs, cfg.gamma
    acts = list(actions)
    tree = Tree(acts)
    tree.add(0)
    samples = sample_incidents(model, clock, H, cfg.iterations, rng, cells).per_depth
    for it in range(cfg.iterations):
        st = [list(s) for s in state]
        node, path, rewards = 0, [0], []
        d = 0
        while d < H:
            kids = tree.children[node]
            if len(kids) < len(acts):
                a = len(kids)
                child = tree.add(d + 1)
                kids.append(child)
            else:
                a = _select(tree, node, cfg.uct_c)
                child = kids[a]
            t0 = clock + d * E
            act = acts[a]
            if act is not None and _legal(st, act, model.capacity):
                apply_move(grid, T, st[act[0]], act[1], t0)
            rewards.append(simulate_epoch(grid, T, st, samples[d][it], t0 + E, E,
                                          pending if d == 0 else (), t0))
            path.append(child)
            node = child
            d += 1
            if tree.visits[child] == 0:
                while d < H:
                    t0 = clock + d * E
                    rewards.append(simulate_epoch(grid, T, st, samples[d][it], t0 + E, E, (), t0))
                    d += 1
                break
        returns = [0.0] * (len(rewards) + 1)
        for k in range(len(rewards) - 1, -1, -1):
            returns[k] = rewards[k] + gamma * returns[k + 1]
        for k, n in enumerate(path):
            g = returns[max(0, k - 1)]
            tree.visits[n] += 1
            tree.total[n] += g
            tree.total_sq[n] += g * g
        tree.rollouts[path[-1]] += 1
        for k in range(1, len(path)):
            g = returns[k - 1]
            if g < tree.lo:
                tree.lo = g
            if g > tree.hi:
                tree.hi = g
    return tree


def unit_rng(cfg: MCTSConfig, sim_seed: int, epoch: int, unit: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, sim_seed, epoch, unit]))


def movable(view) -> bool:
    return view.comms_ok and view.status not in (EN_ROUTE, SERVICING)


def factored_actions(
    state: list[list], movers: Sequence[int], waiting_cells: Sequence[CellId]
) -> list[Action]:
    """Hold, then every (responder, other waiting cell) pair in index order."""
    acts: list[Action] = [None]
    cells = sorted(set(waiting_cells))
    for i in movers:
        for c in cells:
            if c != state[i][WAITING]:
                acts.append((i, c))
    return acts


def pending_rows(model: PlanningModel, pending) -> list[tuple[float, CellId, float]]:
    return [(float(t), int(c), model.service.mean_s) for t, c in pending]


def plan_centralized_mcts(
    snapshot: Snapshot,
    model: PlanningModel,
    mcts: MCTSConfig,
    responders: Sequence[int] | None = None,
    waiting_cells: Sequence[CellId] | None = None,
    cells: Sequence[CellId] | None = None,
    unit: int = 0,
) -> Allocation:
    """One move-or-hold decision for the whole fleet, or for a sub-fleet.

    ``responders``, ``waiting_cells`` and ``cells`` restrict the search to a
    region: only those responders are simulated, only those waiting cells are
    targets and incidents are drawn only in ``cells``. Pending incidents
    outside ``cells`` are ignored.
    """
    views = snapshot.responders
    ids = list(range(len(views))) if responders is None else sorted(responders)
    wc = model.waiting_cells if waiting_cells is None else tuple(waiting_cells)
    alloc = snapshot.allocation
    if not ids or not wc:
        return alloc
    sub = [views[i] for i in ids]
    state = state_from_views(sub, snapshot.clock)
    movers = [k for k, v in enumerate(sub) if movable(v)]
    acts = [a for a in factored_actions(state, movers, wc) if _legal(state, a, model.capacity)]
    if len(acts) == 1:
        return alloc
    region = None if cells is None else set(cells)
    pend = [p for p in pending_rows(model, snapshot.pending) if region is None or p[1] in region]
    rng = unit_rng(mcts, snapshot.seed, snapshot.epoch, unit)
    tree = search(model, state, acts, snapshot.clock, pend, mcts, rng, cells)
    act = acts[tree.best_root_action()]
    if act is None:
        return alloc
    return alloc.with_move(ids[act[0]], act[1])


class CentralizedPlanner:
    name = "central"
    local = False

    def __init__(self, model: PlanningModel, mcts: MCTSConfig, initial: Allocation | None = None):
        self.model = model
        self.mcts = mcts
        self.initial = initial

    def initial_allocation(self) -> Allocation | None:
        return self.initial

    def plan(self, snapshot: Snapshot) -> Allocation:
        return plan_centralized_mcts(snapshot, self.model, self.mcts)
