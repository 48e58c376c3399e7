"""Comparison strategies: random/average/local routers, static full
activation, and the per-node drift-plus-penalty (DPP) deployment controller
with its offline calibration loop.

The DPP controller scores every feasible activation pattern with
``sum_i Q_i * mu_i(a) - V * C(a)`` where mu is a smoothed multiplicative
service-rate proxy over post-action residual capacities and C combines a
congestion-priced GPU cost with a backlog-weighted churn penalty.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .engine import NodeSnapshot
from .model import (
    DeploymentAction,
    EMPTY_ACTION,
    LMTypeSpec,
    Placement,
    ServerSpec,
    SimConfig,
    check_headroom,
    feasible_nodes,
    on_cpu,
    on_gpu,
    placement_feasible,
)

log = logging.getLogger(__name__)

CPU_CORE_GRID = (2, 4, 8)
VGPU_GRID = (1, 2)


@dataclass
class DppParams:
    """Calibrated constants of the drift-plus-penalty controller."""

    v: float = 1.0
    alpha_cpu: dict[int, float] = field(default_factory=dict)  # default 1.0
    alpha_gpu: dict[int, float] = field(default_factory=dict)
    p0: float = 0.1
    p1: float = 0.25
    p2: float = 0.37
    lambda_churn: float = 0.08
    kappa: float = 0.76
    epsilon: float = 0.5

    def a_cpu(self, lm_id: int) -> float:
        return self.alpha_cpu.get(lm_id, 1.0)

    def a_gpu(self, lm_id: int) -> float:
        return self.alpha_gpu.get(lm_id, 1.0)

    def smooth(self, x: float) -> float:
        return self.epsilon + (1.0 - self.epsilon) * x

    def to_dict(self) -> dict:
        return {
            "v": self.v,
            "alpha_cpu": {str(k): v for k, v in self.alpha_cpu.items()},
            "alpha_gpu": {str(k): v for k, v in self.alpha_gpu.items()},
            "p0": self.p0,
            "p1": self.p1,
            "p2": self.p2,
            "lambda_churn": self.lambda_churn,
            "kappa": self.kappa,
            "epsilon": self.epsilon,
        }


def default_dpp_params(config: SimConfig) -> DppParams:
    """Shipped defaults; GPU weights favour the image types."""
    alpha_gpu = {}
    for lm in config.lms:
        alpha_gpu[lm.id] = 1.5 if lm.is_image else (1.2 if lm.gpu_base_seconds_per_prompt > 4 else 1.0)
    return DppParams(alpha_gpu=alpha_gpu)


# --------------------------------------------------------------------------
# routers: each returns a frozen routing matrix {(origin, lm_id): dest}
# --------------------------------------------------------------------------

class RandomRouter:
    """Uniform choice over the LM's feasible nodes, per (origin, LM) per slot."""

    def __init__(self, config: SimConfig, seed: int):
        self.config = config
        self.seed = seed
        self._feasible = {
            lm.id: sorted(feasible_nodes(lm, config.servers)) for lm in config.lms
        }

    def __call__(self, snapshot, arrivals, slot: int) -> dict:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 23, slot]))
        routing = {}
        for req in arrivals:
            key = (req.origin_node, req.lm_type)
            if key in routing:
                continue
            nodes = self._feasible[req.lm_type]
            if nodes:
                routing[key] = nodes[int(rng.integers(len(nodes)))]
        return routing


class AverageRouter:
    """Deterministic round-robin split of each LM's traffic over feasible nodes."""

    def __init__(self, config: SimConfig):
        self.config = config
        self._feasible = {
            lm.id: sorted(feasible_nodes(lm, config.servers)) for lm in config.lms
        }
        self._cursor = {lm.id: 0 for lm in config.lms}

    def __call__(self, snapshot, arrivals, slot: int) -> dict:
        routing = {}
        for req in sorted(arrivals, key=lambda r: (r.lm_type, r.origin_node)):
            key = (req.origin_node, req.lm_type)
            if key in routing:
                continue
            nodes = self._feasible[req.lm_type]
            if not nodes:
                continue
            i = self._cursor[req.lm_type]
            routing[key] = nodes[i % len(nodes)]
            self._cursor[req.lm_type] = (i + 1) % len(nodes)
        return routing


class LocalRouter:
    """Keep every request on its arrival node."""

    def __call__(self, snapshot, arrivals, slot: int) -> dict:
        return {(r.origin_node, r.lm_type): r.origin_node for r in arrivals}


# --------------------------------------------------------------------------
# deployers
# --------------------------------------------------------------------------

def full_activation_action(
    node: ServerSpec, lms: Sequence[LMTypeSpec]
) -> DeploymentAction:
    """Static greedy activation in LM-id order, as many types as fit.

    CPU-capable types take a minimal 2-core slice (keeping vGPUs free for the
    types that cannot run anywhere else); GPU-only types take one vGPU each.
    Computed once and applied unchanged forever.
    """
    chosen: dict[int, Placement] = {}
    for lm in sorted(lms, key=lambda l: l.id):
        for candidate in (on_cpu(CPU_CORE_GRID[0]), on_gpu(1)) if lm.cpu_feasible else (on_gpu(1),):
            if not placement_feasible(node, lm, candidate):
                continue
            trial = dict(chosen)
            trial[lm.id] = candidate
            if check_headroom(node, DeploymentAction.from_dict(trial), {l.id: l for l in lms}):
                chosen[lm.id] = candidate
                break
    return DeploymentAction.from_dict(chosen)


class FullActivationDeployer:
    def __init__(self, config: SimConfig):
        self._actions = {
            s.id: full_activation_action(s, config.lms)
            for s in config.servers
            if not s.control_node
        }

    def for_node(self, node_id: str):
        action = self._actions.get(node_id, EMPTY_ACTION)

        def deploy(snapshot: NodeSnapshot) -> DeploymentAction:
            return action

        return deploy


def placement_options(node: ServerSpec, lm: LMTypeSpec) -> list[Optional[Placement]]:
    """Per-LM menu on a node: Off plus the feasible grid placements."""
    options: list[Optional[Placement]] = [None]
    if lm.cpu_feasible:
        options.extend(
            on_cpu(c) for c in CPU_CORE_GRID if placement_feasible(node, lm, on_cpu(c))
        )
    if node.gpu_capable:
        options.extend(
            on_gpu(g) for g in VGPU_GRID if placement_feasible(node, lm, on_gpu(g))
        )
    return options


def enumerate_actions(
    node: ServerSpec, lms: Sequence[LMTypeSpec]
) -> list[DeploymentAction]:
    """Every headroom-satisfying activation pattern, in canonical order.

    Canonical ordering (LM-id major, Off < CPU < GPU, smaller allocations
    first) doubles as the final lexicographic tie-break for dpp_select.
    """
    ordered = sorted(lms, key=lambda l: l.id)
    menus = [placement_options(node, lm) for lm in ordered]
    lm_map = {l.id: l for l in lms}
    out = []
    for combo in itertools.product(*menus):
        action = DeploymentAction.from_dict(
            {lm.id: p for lm, p in zip(ordered, combo)}
        )
        if check_headroom(node, action, lm_map):
            out.append(action)
    return out


def dpp_feasible_actions(
    snapshot: NodeSnapshot,
    lms: Sequence[LMTypeSpec],
    cache: Optional[dict] = None,
) -> list[DeploymentAction]:
    """The controller's action set for one decision.

    While the node has pending or starting replicas only the no-op survives
    the transient-state filter; otherwise the cached static enumeration.
    """
    if snapshot.transient:
        return [snapshot.current_action]
    if cache is not None and snapshot.node_id in cache:
        return cache[snapshot.node_id]
    actions = enumerate_actions(snapshot.spec, lms)
    if cache is not None:
        cache[snapshot.node_id] = actions
    return actions


def dpp_service_proxy(
    snapshot: NodeSnapshot,
    action: DeploymentAction,
    lms: Mapping[int, LMTypeSpec],
    params: DppParams,
) -> dict[int, float]:
    """Unitless service-rate proxy per type under an action.

    CPU placements scale with smoothed residual core and memory headroom,
    GPU placements with smoothed residual vGPU headroom; residuals are taken
    after the action's own consumption.  Inactive types score zero.
    """
    spec = snapshot.spec
    vgpus = cores = 0
    ram = 0.0
    for lm_id, placement in action.placements:
        ram += lms[lm_id].deploy_ram_gb
        if placement.is_gpu:
            vgpus += placement.units
        else:
            cores += placement.units
    eta_gpu = (spec.vgpu_units - vgpus) / spec.vgpu_units if spec.vgpu_units else 0.0
    eta_cpu = (spec.cpu_cores - cores) / spec.cpu_cores if spec.cpu_cores else 0.0
    eta_mem = (spec.ram_gb - ram) / spec.ram_gb if spec.ram_gb else 0.0

    out = {lm_id: 0.0 for lm_id in lms}
    for lm_id, placement in action.placements:
        if placement.is_gpu:
            out[lm_id] = params.a_gpu(lm_id) * params.smooth(eta_gpu)
        else:
            out[lm_id] = params.a_cpu(lm_id) * params.smooth(eta_cpu) * params.smooth(eta_mem)
    return out


def dpp_gpu_price(snapshot: NodeSnapshot, params: DppParams) -> float:
    """Congestion-dependent shadow price of one GPU-backed instance.

    Rises as current GPU headroom shrinks and as image work dominates the
    local backlog.
    """
    return (
        params.p0
        + params.p1 * (1.0 - snapshot.gpu_residual)
        + params.p2 * snapshot.image_backlog_share
    )


def dpp_churn(
    action: DeploymentAction,
    prev_action: DeploymentAction,
    queues: Mapping[int, float],
    params: DppParams,
) -> float:
    """Backlog-weighted penalty on toggling a type's activation."""
    total = 0.0
    for lm_id in set(queues) | action.active_ids | prev_action.active_ids:
        flip = (lm_id in action.active_ids) != (lm_id in prev_action.active_ids)
        if flip:
            total += 1.0 + params.kappa * queues.get(lm_id, 0.0)
    return params.lambda_churn * total


def dpp_cost(
    snapshot: NodeSnapshot,
    action: DeploymentAction,
    prev_action: DeploymentAction,
    queues: Mapping[int, float],
    params: DppParams,
) -> float:
    """Per-slot deployment cost: GPU price times GPU-backed instances, plus churn."""
    n_gpu = sum(1 for _, p in action.placements if p.is_gpu)
    return dpp_gpu_price(snapshot, params) * n_gpu + dpp_churn(
        action, prev_action, queues, params
    )


def dpp_score(
    snapshot: NodeSnapshot,
    action: DeploymentAction,
    queues: Mapping[int, float],
    lms: Mapping[int, LMTypeSpec],
    params: DppParams,
    prev_action: Optional[DeploymentAction] = None,
) -> float:
    prev = snapshot.current_action if prev_action is None else prev_action
    mu = dpp_service_proxy(snapshot, action, lms, params)
    gain = sum(queues.get(lm, 0.0) * mu[lm] for lm in mu)
    return gain - params.v * dpp_cost(snapshot, action, prev, queues, params)


def dpp_select(
    snapshot: NodeSnapshot,
    queues: Mapping[int, float],
    lms: Mapping[int, LMTypeSpec],
    params: DppParams,
    actions: Optional[Sequence[DeploymentAction]] = None,
) -> DeploymentAction:
    """Argmax of the drift-plus-penalty score over the feasible action set.

    Ties break toward fewer GPU replicas, then lower churn cost, then the
    canonical LM-id lexicographic order.
    """
    if actions is None:
        actions = dpp_feasible_actions(snapshot, list(lms.values()))
    if not actions:
        return snapshot.current_action
    lm_ids = sorted(lms)
    best = None
    best_key = None
    for action in actions:
        score = dpp_score(snapshot, action, queues, lms, params)
        n_gpu = sum(1 for _, p in action.placements if p.is_gpu)
        churn = dpp_churn(action, snapshot.current_action, queues, params)
        key = (-score, n_gpu, churn, action.canonical_key(lm_ids))
        if best_key is None or key < best_key:
            best_key = key
            best = action
    return best


class DppDeployer:
    """Per-node DPP controller with vectorized scoring over a cached action set."""

    def __init__(self, config: SimConfig, params: Optional[DppParams] = None):
        self.config = config
        self.params = params or default_dpp_params(config)
        self.lms = {lm.id: lm for lm in config.lms}
        self.lm_ids = config.lm_ids
        self._cache: dict[str, dict] = {}
        self.flips = 0  # activation toggles actually selected, for calibration

    def _tables(self, snapshot: NodeSnapshot) -> dict:
        node_id = snapshot.node_id
        if node_id not in self._cache:
            actions = enumerate_actions(snapshot.spec, list(self.lms.values()))
            mu = np.array(
                [
                    [
                        dpp_service_proxy(snapshot, a, self.lms, self.params)[lm]
                        for lm in self.lm_ids
                    ]
                    for a in actions
                ]
            )
            n_gpu = np.array(
                [sum(1 for _, p in a.placements if p.is_gpu) for a in actions],
                dtype=float,
            )
            active = np.array(
                [[lm in a.active_ids for lm in self.lm_ids] for a in actions],
                dtype=bool,
            )
            self._cache[node_id] = {
                "actions": actions,
                "mu": mu,
                "n_gpu": n_gpu,
                "active": active,
            }
        return self._cache[node_id]

    def for_node(self, node_id: str):
        def deploy(snapshot: NodeSnapshot) -> DeploymentAction:
            return self.select(snapshot)

        return deploy

    def select(self, snapshot: NodeSnapshot) -> DeploymentAction:
        if snapshot.transient:
            return snapshot.current_action
        t = self._tables(snapshot)
        params = self.params
        q = np.array([snapshot.backlog.get(lm, 0.0) for lm in self.lm_ids])
        prev = snapshot.current_action
        prev_active = np.array([lm in prev.active_ids for lm in self.lm_ids])

        price = dpp_gpu_price(snapshot, params)
        churn = params.lambda_churn * (
            (t["active"] != prev_active) @ (1.0 + params.kappa * q)
        )
        score = t["mu"] @ q - params.v * (price * t["n_gpu"] + churn)

        best = float(score.max())
        tied = np.flatnonzero(score == best)
        if len(tied) > 1:
            order = sorted(tied, key=lambda i: (t["n_gpu"][i], churn[i], i))
            pick = order[0]
        else:
            pick = int(tied[0])
        action = t["actions"][pick]
        if action.active_ids != prev.active_ids:
            self.flips += len(action.active_ids ^ prev.active_ids)
        return action


class RandomDeployer:
    """Uniform draw from the node's feasible action set, fresh every slot.

    Respects the transient-state rule through dpp_feasible_actions, so a
    node with pending or starting replicas only ever redraws the no-op.
    """

    def __init__(self, config: SimConfig, seed: int):
        self.config = config
        self.seed = seed
        self.lms = list(config.lms)
        self._cache: dict[str, list[DeploymentAction]] = {}

    def for_node(self, node_id: str):
        node_index = [s.id for s in self.config.servers].index(node_id)

        def deploy(snapshot: NodeSnapshot) -> DeploymentAction:
            actions = dpp_feasible_actions(snapshot, self.lms, self._cache)
            rng = np.random.default_rng(
                np.random.SeedSequence([self.seed, 31, node_index, snapshot.slot])
            )
            return actions[int(rng.integers(len(actions)))]

        return deploy


# --------------------------------------------------------------------------
# calibration
# --------------------------------------------------------------------------

def calibrate_dpp(
    config: SimConfig,
    iterations: int,
    params: Optional[DppParams] = None,
    step_scale: float = 1.0,
    episode_slots: int = 150,
    flip_threshold: float = 0.05,
    seed: Optional[int] = None,
) -> tuple[DppParams, list[dict]]:
    """Offline tuning loop for the DPP constants.

    Runs short randomized-routing episodes; raises the GPU pricing pair when
    windowed latency worsens while GPU headroom stays high, and the churn
    pair when the per-node-slot flip rate exceeds the threshold.  With zero
    iterations or a zero step the inputs come back unchanged.
    """
    from .experiments import run_episode  # deferred: experiments imports us

    params = replace(params) if params else default_dpp_params(config)
    trajectory = [dict(iteration=0, **params.to_dict())]
    base_seed = config.seed if seed is None else seed

    for it in range(1, iterations + 1):
        stats = run_episode(
            config, "RL", seed=base_seed + it, slots=episode_slots, dpp_params=params
        )
        if step_scale > 0:
            if (
                stats["late_mean_latency"] > stats["early_mean_latency"]
                and stats["gpu_residual_mean"] >= 0.5
            ):
                params.p1 += 0.05 * step_scale
                params.p2 += 0.05 * step_scale
            if stats["flips_per_node_slot"] > flip_threshold:
                params.lambda_churn += 0.02 * step_scale
                params.kappa += 0.10 * step_scale
        trajectory.append(dict(iteration=it, **params.to_dict()))
    return params, trajectory
