"""Two-tier agentic control: the epoch-level planner with episodic memory,
the per-slot prompt scheduler, and per-node deployment control.

Every agent has a deterministic scripted backend; an external text-completion
backend can replace it, but whatever it returns passes through strict
validation and falls back to a safe policy on any violation.  The simulator
itself never needs network access.
"""

from __future__ import annotations

import json
import logging
import math
import os
import urllib.request
from dataclasses import dataclass, field
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np

from .engine import ClusterSnapshot, NodeSnapshot, PENDING, RUNNING, STARTING
from .metrics import EpochTelemetry
from .model import (
    DeploymentAction,
    LMTypeSpec,
    MacroPolicy,
    Placement,
    Request,
    SimConfig,
    check_headroom,
    feasible_nodes,
    macro_policy_violations,
    on_cpu,
    on_gpu,
    placement_feasible,
)

log = logging.getLogger(__name__)

ENV_URL = "EDGELLM_PLANNER_URL"
ENV_TOKEN = "EDGELLM_PLANNER_TOKEN"
ENV_TIMEOUT = "EDGELLM_PLANNER_TIMEOUT_S"

ROUTING_KEY = "routing_probabilities"
ROLES_KEY = "node_role_intent"


# --------------------------------------------------------------------------
# episodic memory
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class HistoryCase:
    """One remembered epoch: telemetry, the policy that produced it, scores."""

    epoch: int
    telemetry: EpochTelemetry
    policy: MacroPolicy
    f_norm: Optional[float]
    t_norm: Optional[float]

    @property
    def objective(self) -> Optional[float]:
        return self.telemetry.objective


@dataclass
class EpisodicMemory:
    """Append-only store of history cases, retrieved by workload mix."""

    cases: list[HistoryCase] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cases)


def record_case(
    memory: EpisodicMemory,
    epoch: int,
    telemetry: EpochTelemetry,
    policy: MacroPolicy,
) -> EpisodicMemory:
    memory.cases.append(
        HistoryCase(
            epoch=epoch,
            telemetry=telemetry,
            policy=policy,
            f_norm=telemetry.f_norm,
            t_norm=telemetry.t_norm,
        )
    )
    return memory


def retrieve_cases(
    memory: EpisodicMemory, current_mix: Mapping[int, float], k: int
) -> list[HistoryCase]:
    """Up to k cases: global best and worst objective plus nearest neighbours
    by Euclidean distance on the arrival-share vector.  Ties go to recency.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scored = [c for c in memory.cases if c.objective is not None]
    if not memory.cases:
        return []
    picks: list[HistoryCase] = []
    if scored:
        best = min(scored, key=lambda c: (c.objective, -c.epoch))
        picks.append(best)
        worst = max(scored, key=lambda c: (c.objective, c.epoch))
        if worst not in picks:
            picks.append(worst)

    def distance(case: HistoryCase) -> float:
        share = case.telemetry.arrival_share
        keys = set(share) | set(current_mix)
        return math.sqrt(
            sum((share.get(i, 0.0) - current_mix.get(i, 0.0)) ** 2 for i in keys)
        )

    for case in sorted(memory.cases, key=lambda c: (distance(c), -c.epoch)):
        if len(picks) >= k:
            break
        if case not in picks:
            picks.append(case)
    return picks[:k]


# --------------------------------------------------------------------------
# prompt rendering
# --------------------------------------------------------------------------

def _fmt_per_lm(values: Mapping[int, Optional[float]], lm_ids, pattern: str) -> str:
    parts = []
    for lm in lm_ids:
        v = values.get(lm)
        parts.append("n/a" if v is None else pattern.format(v))
    return ", ".join(parts)


def summarize_epoch(
    telemetry: EpochTelemetry,
    policy: Optional[MacroPolicy],
    static_context: str = "",
) -> str:
    """Deterministic natural-language rendering of one epoch's telemetry."""
    lm_ids = sorted(telemetry.success_ratio)
    names = "/".join(f"LM{lm}" for lm in lm_ids)
    if telemetry.no_data:
        body = f"In the last epoch, no requests completed; {names} produced no telemetry."
    else:
        lat = _fmt_per_lm(telemetry.success_mean_latency_s, lm_ids, "{:.1f}")
        ratios = _fmt_per_lm(telemetry.success_ratio, lm_ids, "{:.2f}")
        succ = [r for r in telemetry.success_mean_latency_s.values() if r is not None]
        weights = [
            telemetry.successes.get(lm, 0)
            for lm in lm_ids
            if telemetry.success_mean_latency_s.get(lm) is not None
        ]
        if succ and sum(weights):
            global_mean = sum(s * w for s, w in zip(succ, weights)) / sum(weights)
            global_txt = f"{global_mean:.1f} s"
        else:
            global_txt = "n/a"
        f_txt = "n/a" if telemetry.f_norm is None else f"{telemetry.f_norm:.2f}"
        body = (
            f"In the last epoch, {names} have success-only mean latencies {lat} s "
            f"with success ratios {ratios}, respectively. "
            f"The resulting global mean latency is {global_txt} and the "
            f"normalized Jain fairness over success ratios is {f_txt}."
        )
    if policy is not None:
        roles = "; ".join(
            f"{node}: {', '.join(f'LM{lm}' for lm in sorted(role)) or 'none'}"
            for node, role in sorted(policy.node_roles.items())
        )
        body += f" The corresponding macro policy assigned roles {roles}."
    if telemetry.off_role_ratio is not None:
        body += f" The micro router had an off-role ratio of {100 * telemetry.off_role_ratio:.1f}%."
    if static_context:
        body += f" {static_context}"
    return body


def render_static_context(config: SimConfig) -> str:
    nodes = "; ".join(
        f"{s.id}: {s.cpu_cores} cores, {s.ram_gb:g} GB RAM, "
        f"{s.vgpu_units} vGPU, {s.vram_gb:g} GB vRAM"
        + (" (control)" if s.control_node else "")
        for s in config.servers
    )
    lms = "; ".join(
        f"{lm.name}: {lm.modality}, {lm.deploy_ram_gb:g} GB RAM, "
        f"{lm.min_vram_gb:g} GB vRAM floor"
        + ("" if lm.cpu_feasible else ", GPU-only")
        for lm in config.lms
    )
    return f"Cluster: {nodes}. Services: {lms}."


def render_planner_prompt(
    config: SimConfig,
    telemetry: Optional[EpochTelemetry],
    cases: Sequence[HistoryCase],
    baseline: Optional[EpochTelemetry],
    policy: Optional[MacroPolicy],
) -> str:
    """The planner's full request text: objective, context, history, telemetry."""
    lines = [
        "Reduce global average latency while improving fairness across LMs' "
        "success service ratios.",
        render_static_context(config),
    ]
    if baseline is not None and baseline.objective is not None:
        lines.append(
            f"Random-policy baseline objective: {baseline.objective:.4f} "
            f"(fairness {baseline.f_norm:.2f}, normalized latency {baseline.t_norm:.2f})."
        )
    for case in cases:
        lines.append("Past case: " + summarize_epoch(case.telemetry, case.policy))
    if telemetry is not None:
        lines.append(summarize_epoch(telemetry, policy))
    lines.append(
        "Answer with one strict JSON object with keys "
        f"'{ROUTING_KEY}' (per-LM node probability rows summing to 1 over "
        f"feasible nodes) and '{ROLES_KEY}' (per-node lists of LM names)."
    )
    return "\n".join(lines)


# --------------------------------------------------------------------------
# backends
# --------------------------------------------------------------------------

class PlannerBackend(Protocol):
    def complete(self, prompt: str) -> str: ...


class ExternalBackend:
    """Single request/response exchange with a hosted completion endpoint.

    Endpoint, credential and timeout come from the environment; the response
    body is treated as the raw completion text.  Any transport failure or
    timeout surfaces as an exception the caller turns into a fallback.
    """

    def __init__(
        self,
        url: Optional[str] = None,
        token: Optional[str] = None,
        timeout_s: Optional[float] = None,
    ):
        self.url = url or os.environ.get(ENV_URL, "")
        self.token = token or os.environ.get(ENV_TOKEN, "")
        self.timeout_s = (
            timeout_s
            if timeout_s is not None
            else float(os.environ.get(ENV_TIMEOUT, "30"))
        )
        if not self.url:
            raise ValueError(f"external backend needs {ENV_URL}")

    def complete(self, prompt: str) -> str:
        req = urllib.request.Request(
            self.url,
            data=prompt.encode("utf-8"),
            headers={"Content-Type": "text/plain"}
            | ({"Authorization": f"Bearer {self.token}"} if self.token else {}),
            method="POST",
        )
        with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
            return resp.read().decode("utf-8")


# --------------------------------------------------------------------------
# macro policy assembly and validation
# --------------------------------------------------------------------------

def _lm_key_map(config: SimConfig) -> dict[str, int]:
    out = {}
    for lm in config.lms:
        out[lm.name] = lm.id
        out[str(lm.id)] = lm.id
    return out


def parse_macro_policy(text: str, config: SimConfig) -> MacroPolicy:
    """Decode the planner wire format; raises ValueError on any shape problem."""
    obj = json.loads(text)
    if not isinstance(obj, dict):
        raise ValueError("top level is not an object")
    if ROUTING_KEY not in obj or ROLES_KEY not in obj:
        raise ValueError(f"missing '{ROUTING_KEY}' or '{ROLES_KEY}'")
    keymap = _lm_key_map(config)

    routing: dict[int, dict[str, float]] = {}
    raw_routing = obj[ROUTING_KEY]
    if not isinstance(raw_routing, dict):
        raise ValueError(f"'{ROUTING_KEY}' is not an object")
    for lm_key, row in raw_routing.items():
        if lm_key not in keymap:
            raise ValueError(f"unknown LM {lm_key!r}")
        if not isinstance(row, dict):
            raise ValueError(f"routing row for {lm_key!r} is not an object")
        routing[keymap[lm_key]] = {
            str(node): float(p) for node, p in row.items()
        }

    roles: dict[str, frozenset] = {}
    raw_roles = obj[ROLES_KEY]
    if not isinstance(raw_roles, dict):
        raise ValueError(f"'{ROLES_KEY}' is not an object")
    for node, lst in raw_roles.items():
        if not isinstance(lst, (list, tuple)):
            raise ValueError(f"role list for {node!r} is not a list")
        ids = set()
        for lm_key in lst:
            if str(lm_key) not in keymap:
                raise ValueError(f"unknown LM {lm_key!r} in roles")
            ids.add(keymap[str(lm_key)])
        roles[str(node)] = frozenset(ids)
    return MacroPolicy(routing_probs=routing, node_roles=roles)


def macro_policy_to_json(policy: MacroPolicy, config: SimConfig) -> str:
    names = {lm.id: lm.name for lm in config.lms}
    obj = {
        ROUTING_KEY: {
            names[lm]: {n: p for n, p in sorted(row.items())}
            for lm, row in sorted(policy.routing_probs.items())
        },
        ROLES_KEY: {
            node: sorted(names[lm] for lm in role)
            for node, role in sorted(policy.node_roles.items())
        },
    }
    return json.dumps(obj, sort_keys=True)


def greedy_role_packing(
    config: SimConfig, demand_weights: Optional[Mapping[int, float]] = None
) -> dict[str, frozenset]:
    """Assign node roles by packing LMs in descending GPU-hunger order.

    Each type claims capable nodes (reserving minimum allocations) until its
    credited service rate covers its expected demand with slack; GPU-only
    heavy types go first so they end up on the GPU-rich nodes.
    """
    from .workload import expected_prompts_per_slot

    workers = [s for s in config.servers if not s.control_node]
    remaining = {
        s.id: {"vgpu": s.vgpu_units, "cores": s.cpu_cores, "ram": s.ram_gb,
               "vram": s.vram_gb}
        for s in workers
    }
    roles: dict[str, set] = {s.id: set() for s in workers}

    hunger = sorted(
        config.lms,
        key=lambda lm: (lm.cpu_feasible, -lm.gpu_base_seconds_per_prompt, lm.id),
    )
    for lm in hunger:
        if demand_weights is not None:
            total = sum(demand_weights.values()) or 1.0
            cluster_prompts = sum(
                expected_prompts_per_slot(config, i) for i in config.lm_ids
            )
            demand = cluster_prompts * demand_weights.get(lm.id, 0.0) / total
        else:
            demand = expected_prompts_per_slot(config, lm.id)
        target = max(demand * 1.25, 1e-6)

        # most capable nodes first: GPU capacity, then cores
        order = sorted(
            workers,
            key=lambda s: (-remaining[s.id]["vgpu"], -remaining[s.id]["cores"], s.id),
        )
        credited = 0.0
        assigned = 0
        for node in order:
            if credited >= target and assigned >= 1:
                break
            rem = remaining[node.id]
            if rem["ram"] < lm.deploy_ram_gb:
                continue
            # GPU-only types reserve up to two vGPUs (what deployment will
            # grant them); CPU-capable types claim GPU only when it is spare,
            # else an 8-core slice, and are credited at the matching rate.
            if (
                not lm.cpu_feasible
                and node.gpu_capable
                and rem["vgpu"] >= 1
                and rem["vram"] >= lm.min_vram_gb
            ):
                units = min(2, rem["vgpu"])
                rem["vgpu"] -= units
                rem["vram"] -= lm.min_vram_gb
                rem["ram"] -= lm.deploy_ram_gb
                credited += config.slot_seconds * units**lm.gpu_speedup_exponent / (
                    lm.gpu_base_seconds_per_prompt
                )
            elif (
                lm.cpu_feasible
                and node.gpu_capable
                and rem["vgpu"] >= 1
                and rem["vram"] >= lm.min_vram_gb
            ):
                rem["vgpu"] -= 1
                rem["vram"] -= lm.min_vram_gb
                rem["ram"] -= lm.deploy_ram_gb
                credited += config.slot_seconds / lm.gpu_base_seconds_per_prompt
            elif lm.cpu_feasible and rem["cores"] >= 2:
                cores = 8 if rem["cores"] >= 8 else rem["cores"]
                rem["cores"] -= cores
                rem["ram"] -= lm.deploy_ram_gb
                credited += config.slot_seconds * cores**lm.cpu_speedup_exponent / (
                    lm.cpu_base_seconds_per_prompt
                )
            else:
                continue
            roles[node.id].add(lm.id)
            assigned += 1
    return {node: frozenset(role) for node, role in roles.items()}


def baseline_policy(config: SimConfig) -> MacroPolicy:
    """The uniformly randomized reference policy: even routing over each LM's
    feasible nodes plus greedily packed roles.  Also the validation fallback.
    """
    routing = {}
    for lm in config.lms:
        feas = sorted(feasible_nodes(lm, config.servers))
        routing[lm.id] = (
            {n: 1.0 / len(feas) for n in feas} if feas else {}
        )
    return MacroPolicy(routing_probs=routing, node_roles=greedy_role_packing(config))


def validate_macro_policy(
    candidate: Optional[MacroPolicy], config: SimConfig
) -> tuple[MacroPolicy, bool]:
    """Accept a well-formed candidate or fall back to the random baseline.

    Returns (policy, fell_back).  Fallback is the error path by design; the
    violation list is logged, never raised.
    """
    if candidate is None:
        log.warning("macro policy missing; falling back to random baseline")
        return baseline_policy(config), True
    violations = macro_policy_violations(candidate, config)
    if violations:
        log.warning(
            "macro policy rejected (%s); falling back to random baseline",
            "; ".join(violations),
        )
        return baseline_policy(config), True
    return candidate, False


# --------------------------------------------------------------------------
# tier-1 planner
# --------------------------------------------------------------------------

def scripted_macro_policy(
    config: SimConfig,
    previous: MacroPolicy,
    telemetry: EpochTelemetry,
) -> MacroPolicy:
    """Deterministic planner step.

    Each LM's routing mass shifts toward nodes holding little backlog, in
    proportion to that LM's fairness deficit (capped per epoch); roles are
    re-packed using the observed arrival mix.
    """
    cap = config.planner_shift_cap
    backlog_total = {
        node: sum(per.values())
        for node, per in telemetry.node_backlog_mean.items()
    }
    routing: dict[int, dict[str, float]] = {}
    for lm in config.lms:
        feas = sorted(feasible_nodes(lm, config.servers))
        if not feas:
            routing[lm.id] = {}
            continue
        old = previous.routing_probs.get(lm.id, {})
        old_row = np.array([old.get(n, 0.0) for n in feas])
        if old_row.sum() <= 0:
            old_row = np.ones(len(feas))
        old_row = old_row / old_row.sum()

        inv = np.array([1.0 / (backlog_total.get(n, 0.0) + 1.0) for n in feas])
        target = inv / inv.sum()

        ratio = telemetry.success_ratio.get(lm.id)
        resolved = telemetry.resolved.get(lm.id, 0)
        deficit = (1.0 - ratio) if ratio is not None else (1.0 if resolved else 0.0)
        step = cap * deficit
        row = (1.0 - step) * old_row + step * target
        row = row / row.sum()
        routing[lm.id] = {n: float(p) for n, p in zip(feas, row)}

    roles = greedy_role_packing(config, telemetry.arrival_share or None)
    return MacroPolicy(routing_probs=routing, node_roles=roles)


class MacroPlanner:
    """Epoch-boundary planner: scripted by default, external text backend
    optional, always validated with random-baseline fallback."""

    def __init__(
        self,
        config: SimConfig,
        backend: Optional[PlannerBackend] = None,
        memory: Optional[EpisodicMemory] = None,
    ):
        self.config = config
        self.backend = backend
        self.memory = memory if memory is not None else EpisodicMemory()
        self.baseline_reference: Optional[EpochTelemetry] = None
        self.fallbacks = 0

    def plan(
        self,
        previous: MacroPolicy,
        telemetry: Optional[EpochTelemetry],
    ) -> MacroPolicy:
        if telemetry is None or telemetry.no_data:
            # nothing observed yet: keep flying the previous (validated) policy
            policy, _ = validate_macro_policy(previous, self.config)
            return policy
        if self.baseline_reference is None:
            self.baseline_reference = telemetry

        candidate: Optional[MacroPolicy]
        if self.backend is None:
            candidate = scripted_macro_policy(self.config, previous, telemetry)
        else:
            cases = retrieve_cases(
                self.memory, telemetry.arrival_share, self.config.retrieval_k
            )
            prompt = render_planner_prompt(
                self.config, telemetry, cases, self.baseline_reference, previous
            )
            try:
                candidate = parse_macro_policy(self.backend.complete(prompt), self.config)
            except Exception as exc:
                log.warning("planner backend failed (%s); falling back", exc)
                candidate = None

        policy, fell_back = validate_macro_policy(candidate, self.config)
        if fell_back:
            self.fallbacks += 1
        return policy


# --------------------------------------------------------------------------
# tier-2: prompt scheduling
# --------------------------------------------------------------------------

def schedule_prompts(
    policy: MacroPolicy,
    snapshot: ClusterSnapshot,
    arrivals: Sequence[Request],
    rng: np.random.Generator,
    config: SimConfig,
) -> dict[tuple[str, int], str]:
    """Translate routing probabilities into this slot's frozen routing matrix.

    Destinations sample from the macro distribution.  A destination counts as
    overloaded when its backlog for the type exceeds the configured multiple
    of the mean backlog across the nodes intended to serve that type, or when
    it is role-inconsistent with no live replica (zero effective headroom);
    overloaded picks swap for the least-backlogged role-consistent node.
    """
    matrix: dict[tuple[str, int], str] = {}
    for req in sorted(arrivals, key=lambda r: (r.origin_node, r.lm_type)):
        key = (req.origin_node, req.lm_type)
        if key in matrix:
            continue
        row = policy.routing_probs.get(req.lm_type, {})
        nodes = sorted(n for n, p in row.items() if p > 0)
        if not nodes:
            continue
        probs = np.array([row[n] for n in nodes])
        dest = nodes[int(rng.choice(len(nodes), p=probs / probs.sum()))]

        feas = sorted(feasible_nodes(config.lm(req.lm_type), config.servers))
        backlogs = {n: snapshot.backlog_of(n, req.lm_type) for n in feas}
        consistent = [n for n in feas if req.lm_type in policy.role_of(n)]
        reference = consistent or feas
        mean = sum(backlogs[n] for n in reference) / len(reference)

        overloaded = backlogs.get(dest, 0.0) > config.reroute_backlog_factor * mean
        if not overloaded and dest not in consistent and consistent:
            has_replica = req.lm_type in snapshot.nodes[dest].placements and (
                snapshot.nodes[dest].phases.get(req.lm_type) in (PENDING, STARTING, RUNNING)
            )
            overloaded = not has_replica
        if overloaded and consistent:
            dest = min(consistent, key=lambda n: (backlogs[n], n))
        matrix[key] = dest
    return matrix


class AgenticScheduler:
    """Per-slot routing agent driven by the live macro policy."""

    def __init__(self, config: SimConfig, seed: int):
        self.config = config
        self.seed = seed
        self.policy: Optional[MacroPolicy] = None

    def __call__(self, snapshot: ClusterSnapshot, arrivals, slot: int) -> dict:
        if self.policy is None:
            return {}
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 47, slot]))
        return schedule_prompts(self.policy, snapshot, arrivals, rng, self.config)


# --------------------------------------------------------------------------
# tier-2: deployment control
# --------------------------------------------------------------------------

def scripted_deploy_action(
    snapshot: NodeSnapshot,
    role_set: frozenset,
    lms: Mapping[int, LMTypeSpec],
) -> DeploymentAction:
    """Role-driven activation sized by backlog.

    Role types activate in descending backlog order: GPU-needing types split
    the vGPUs, CPU-capable types take GPU only when spare, else an even core
    share.  Non-role replicas with work in queue stay up unless a role type
    is blocked by them; idle non-role replicas shut down.
    """
    spec = snapshot.spec
    rem = {
        "vgpu": spec.vgpu_units,
        "cores": spec.cpu_cores,
        "ram": spec.ram_gb,
        "vram": spec.vram_gb,
    }
    chosen: dict[int, Placement] = {}

    def claim(lm: LMTypeSpec, placement: Placement) -> bool:
        if not placement_feasible(spec, lm, placement):
            return False
        need_vgpu = placement.units if placement.is_gpu else 0
        need_cores = 0 if placement.is_gpu else placement.units
        need_vram = lm.min_vram_gb if placement.is_gpu else 0.0
        if (
            need_vgpu > rem["vgpu"]
            or need_cores > rem["cores"]
            or lm.deploy_ram_gb > rem["ram"] + 1e-9
            or need_vram > rem["vram"] + 1e-9
        ):
            return False
        rem["vgpu"] -= need_vgpu
        rem["cores"] -= need_cores
        rem["ram"] -= lm.deploy_ram_gb
        rem["vram"] -= need_vram
        chosen[lm.id] = placement
        return True

    role_lms = sorted(
        (lms[i] for i in role_set if i in lms),
        key=lambda lm: (-snapshot.backlog.get(lm.id, 0.0), lm.id),
    )
    gpu_needing = [lm for lm in role_lms if not lm.cpu_feasible]
    cpu_capable = [lm for lm in role_lms if lm.cpu_feasible]

    if gpu_needing and spec.vgpu_units:
        share = max(1, spec.vgpu_units // len(gpu_needing))
        for lm in gpu_needing:
            for units in range(min(2, share, rem["vgpu"]), 0, -1):
                if claim(lm, on_gpu(units)):
                    break
    for lm in cpu_capable:
        placed = False
        if rem["vgpu"] >= 1 and spec.gpu_capable:
            placed = claim(lm, on_gpu(1))
        if not placed:
            for cores in (8, 4, 2):
                if cores <= rem["cores"] and claim(lm, on_cpu(cores)):
                    placed = True
                    break

    # keep busy non-role replicas alive when they do not block anything
    blocked_role = [lm for lm in role_lms if lm.id not in chosen]
    for lm_id, placement in sorted(snapshot.placements.items()):
        if lm_id in chosen or lm_id in role_set:
            continue
        if snapshot.phases.get(lm_id) not in (PENDING, STARTING, RUNNING):
            continue
        if snapshot.backlog.get(lm_id, 0.0) <= 0:
            continue
        if blocked_role:
            continue  # free its resources for the role set
        claim(lms[lm_id], placement)

    return DeploymentAction.from_dict(chosen)


def parse_deploy_action(
    text: str, snapshot: NodeSnapshot, config: SimConfig
) -> DeploymentAction:
    """Decode a per-node action reply: {"LM1": "off"|{"cpu": n}|{"gpu": n}}."""
    obj = json.loads(text)
    if not isinstance(obj, dict):
        raise ValueError("top level is not an object")
    keymap = _lm_key_map(config)
    chosen: dict[int, Optional[Placement]] = {}
    for lm_key, val in obj.items():
        if str(lm_key) not in keymap:
            raise ValueError(f"unknown LM {lm_key!r}")
        lm_id = keymap[str(lm_key)]
        if val == "off":
            chosen[lm_id] = None
        elif isinstance(val, dict) and "cpu" in val:
            chosen[lm_id] = on_cpu(int(val["cpu"]))
        elif isinstance(val, dict) and "gpu" in val:
            chosen[lm_id] = on_gpu(int(val["gpu"]))
        else:
            raise ValueError(f"bad placement {val!r}")
    action = DeploymentAction.from_dict(chosen)
    lm_map = {lm.id: lm for lm in config.lms}
    for lm_id, placement in action.placements:
        if not placement_feasible(snapshot.spec, lm_map[lm_id], placement):
            raise ValueError(f"infeasible placement for LM{lm_id}")
    if not check_headroom(snapshot.spec, action, lm_map):
        raise ValueError("action exceeds node budgets")
    return action


def render_deploy_prompt(snapshot: NodeSnapshot, role_set, config: SimConfig) -> str:
    names = {lm.id: lm.name for lm in config.lms}
    backlog = ", ".join(
        f"{names[lm]}={snapshot.backlog.get(lm, 0.0):.0f}" for lm in sorted(names)
    )
    roles = ", ".join(names[lm] for lm in sorted(role_set)) or "none"
    return (
        f"Node {snapshot.node_id}: {snapshot.spec.cpu_cores} cores, "
        f"{snapshot.spec.ram_gb:g} GB RAM, {snapshot.spec.vgpu_units} vGPU. "
        f"Queued prompts: {backlog}. Expected services: {roles}. "
        "Answer with one JSON object mapping each LM name to \"off\", "
        "{\"cpu\": cores} or {\"gpu\": vgpus}."
    )


class DeployControlAgent:
    """Per-node deployment agent: scripted rule, optional external backend."""

    def __init__(
        self,
        config: SimConfig,
        backend: Optional[PlannerBackend] = None,
    ):
        self.config = config
        self.backend = backend
        self.lms = {lm.id: lm for lm in config.lms}
        self.role_sets: dict[str, frozenset] = {}

    def set_policy(self, policy: MacroPolicy) -> None:
        self.role_sets = {
            node: policy.role_of(node) for node in (s.id for s in self.config.servers)
        }

    def for_node(self, node_id: str):
        def deploy(snapshot: NodeSnapshot) -> DeploymentAction:
            role = self.role_sets.get(node_id, frozenset())
            scripted = scripted_deploy_action(snapshot, role, self.lms)
            if self.backend is None:
                return scripted
            try:
                reply = self.backend.complete(
                    render_deploy_prompt(snapshot, role, self.config)
                )
                return parse_deploy_action(reply, snapshot, self.config)
            except Exception as exc:
                log.warning("deploy backend failed on %s (%s); using scripted action",
                            node_id, exc)
                return scripted

        return deploy
