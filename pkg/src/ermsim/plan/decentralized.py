"""Per-responder MCTS with peers frozen at their last-known state."""
from __future__ import annotations

from ..geo import CellId
from ..sim import EN_ROUTE, SERVICING, Allocation, LocalSnapshot
from .mcts import MCTSConfig, _legal, factored_actions, pending_rows, search, unit_rng
from .model import PlanningModel, state_from_views


def plan_decentralized(snapshot: LocalSnapshot, model: PlanningModel, mcts: MCTSConfig) -> CellId:
    """Waiting cell chosen by one responder from its own view of the fleet.

    The responder searches over its own moves only. Peers keep their
    last-known waiting cells and are dispatched greedily in the rollouts.
    """
    me = snapshot.self_id
    views = snapshot.responders
    current = views[me].waiting_cell
    if views[me].status in (EN_ROUTE, SERVICING):
        return current
    state = state_from_views(views, snapshot.clock)
    acts = [a for a in factored_actions(state, [me], model.waiting_cells) if _legal(state, a, model.capacity)]
    if len(acts) == 1:
        return current
    rng = unit_rng(mcts, snapshot.seed, snapshot.epoch, me)
    tree = search(model, state, acts, snapshot.clock, pending_rows(model, snapshot.pending), mcts, rng)
    act = acts[tree.best_root_action()]
    return current if act is None else act[1]


class DecentralizedPlanner:
    name = "decentral"
    local = True

    def __init__(self, model: PlanningModel, mcts: MCTSConfig, initial: Allocation | None = None):
        self.model = model
        self.mcts = mcts
        self.initial = initial

    def initial_allocation(self) -> Allocation | None:
        return self.initial

    def plan_responder(self, snapshot: LocalSnapshot) -> CellId:
        return plan_decentralized(snapshot, self.model, self.mcts)
