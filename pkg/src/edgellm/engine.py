"""Slot-and-epoch event loop.

Each slot runs the fixed sequence: snapshot of the previous slot's end state,
routing of fresh arrivals, per-node deployment control, then event-driven
advancement of every node by one slot.  Nodes interact only through uplink
transfers computed at routing time, so each node owns an independent event
heap and the whole run is deterministic given (config, seed, policies).

Replica lifecycle: pending -> starting -> running -> terminating.  Starting
and terminating replicas hold their full resource budgets; pending replicas
hold nothing yet but block any further resource-consuming action on the node
until they start.  Stopping a replica mid-batch checkpoints the in-service
request at its last completed prompt; the request resumes from there on the
next replica without reprocessing.
"""

from __future__ import annotations

import heapq
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .latency import LinkTable, per_prompt_seconds, startup_delay, termination_delay
from .metrics import EpochTelemetry, build_epoch_telemetry
from .model import (
    DeploymentAction,
    LMTypeSpec,
    MacroPolicy,
    Placement,
    Request,
    ServerSpec,
    SimConfig,
    feasible_nodes,
)

log = logging.getLogger(__name__)

PENDING = "pending"
STARTING = "starting"
RUNNING = "running"
TERMINATING = "terminating"

FAIL_DEADLINE = "deadline"
FAIL_NEVER_DEPLOYABLE = "never-deployable"


class EngineInvariantError(RuntimeError):
    """A runtime audit (resource safety, conservation, reprocessing) failed."""


@dataclass
class ReplicaState:
    lm_type: int
    mode: Placement
    phase: str
    phase_end: Optional[float] = None
    serving: Optional[Request] = None
    serial: int = 0  # bumped on interruption; stale service events are dropped
    per_prompt_s: float = 0.0

    @property
    def holds_resources(self) -> bool:
        return self.phase in (STARTING, RUNNING, TERMINATING)


@dataclass
class SlotOutcome:
    slot: int
    completed: list[Request] = field(default_factory=list)
    failed: list[Request] = field(default_factory=list)
    backlog: dict[str, dict[int, float]] = field(default_factory=dict)
    # per-node (vgpus, cores, ram, vram) held at slot end
    resources: dict[str, tuple] = field(default_factory=dict)
    arrivals: int = 0
    in_flight: int = 0
    arrivals_total: int = 0
    resolved_total: int = 0


@dataclass
class NodeSnapshot:
    """What Tier-2 agents see: state aggregated to the end of the prior slot."""

    node_id: str
    spec: ServerSpec
    slot: int
    backlog: dict[int, float]
    placements: dict[int, Placement]
    phases: dict[int, str]
    transient: bool
    gpu_residual: float
    cpu_residual: float
    ram_residual: float
    image_backlog_share: float

    @property
    def current_action(self) -> DeploymentAction:
        live = {
            lm: p
            for lm, p in self.placements.items()
            if self.phases[lm] in (PENDING, STARTING, RUNNING)
        }
        return DeploymentAction.from_dict(live)


@dataclass
class ClusterSnapshot:
    slot: int
    nodes: dict[str, NodeSnapshot]
    policy: Optional[MacroPolicy] = None

    def backlog_of(self, node_id: str, lm_id: int) -> float:
        return self.nodes[node_id].backlog.get(lm_id, 0.0)


class NodeRuntime:
    """Live state of one server: queues, replicas and a private event heap."""

    def __init__(self, spec: ServerSpec, world: "World"):
        self.spec = spec
        self.world = world
        self.queues: dict[int, deque[Request]] = {
            lm: deque() for lm in world.config.lm_ids
        }
        self.replicas: dict[int, ReplicaState] = {}
        self._events: list = []
        self._seq = 0

    # -- event plumbing ----------------------------------------------------
    def push_event(self, when: float, kind: str, payload) -> None:
        # deadlines sort after same-instant events so a completion landing at
        # exactly tau still counts as a success (T_q <= tau is inclusive)
        priority = 1 if kind == "deadline" else 0
        self._seq += 1
        heapq.heappush(self._events, (when, priority, self._seq, kind, payload))

    # -- resource accounting -----------------------------------------------
    def held(self) -> tuple[int, int, float, float]:
        """(vgpus, cores, ram, vram) held by replicas in resource-holding phases."""
        vgpus = cores = 0
        ram = vram = 0.0
        for rep in self.replicas.values():
            if not rep.holds_resources:
                continue
            lm = self.world.lms[rep.lm_type]
            ram += lm.deploy_ram_gb
            if rep.mode.is_gpu:
                vgpus += rep.mode.units
                vram += lm.min_vram_gb
            else:
                cores += rep.mode.units
        return vgpus, cores, ram, vram

    def fits(self, lm: LMTypeSpec, mode: Placement) -> bool:
        vgpus, cores, ram, vram = self.held()
        ram += lm.deploy_ram_gb
        if mode.is_gpu:
            vgpus += mode.units
            vram += lm.min_vram_gb
        else:
            cores += mode.units
        return (
            vgpus <= self.spec.vgpu_units
            and cores <= self.spec.cpu_cores
            and ram <= self.spec.ram_gb + 1e-9
            and vram <= self.spec.vram_gb + 1e-9
        )

    def assert_resource_safety(self) -> None:
        vgpus, cores, ram, vram = self.held()
        if (
            vgpus > self.spec.vgpu_units
            or cores > self.spec.cpu_cores
            or ram > self.spec.ram_gb + 1e-9
            or vram > self.spec.vram_gb + 1e-9
        ):
            raise EngineInvariantError(
                f"{self.spec.id}: resource budgets exceeded "
                f"(vgpu {vgpus}/{self.spec.vgpu_units}, cores {cores}/{self.spec.cpu_cores}, "
                f"ram {ram}/{self.spec.ram_gb}, vram {vram}/{self.spec.vram_gb})"
            )

    def backlog_prompts(self, lm_id: int) -> float:
        """Queued prompts plus the in-service remainder for one type."""
        total = float(
            sum(req.k_prompts - req.progress for req in self.queues[lm_id])
        )
        rep = self.replicas.get(lm_id)
        if rep is not None and rep.serving is not None:
            total += rep.serving.k_prompts - rep.serving.progress
        return total

    def transient(self) -> bool:
        return any(r.phase in (PENDING, STARTING) for r in self.replicas.values())

    # -- snapshot ------------------------------------------------------------
    def snapshot(self, slot: int = 0) -> NodeSnapshot:
        backlog = {lm: self.backlog_prompts(lm) for lm in self.world.config.lm_ids}
        total = sum(backlog.values())
        image = sum(
            v for lm, v in backlog.items() if self.world.lms[lm].is_image
        )
        vgpus, cores, ram, _ = self.held()
        return NodeSnapshot(
            node_id=self.spec.id,
            spec=self.spec,
            slot=slot,
            backlog=backlog,
            placements={lm: r.mode for lm, r in self.replicas.items()},
            phases={lm: r.phase for lm, r in self.replicas.items()},
            transient=self.transient(),
            gpu_residual=(
                (self.spec.vgpu_units - vgpus) / self.spec.vgpu_units
                if self.spec.vgpu_units
                else 1.0
            ),
            cpu_residual=(
                (self.spec.cpu_cores - cores) / self.spec.cpu_cores
                if self.spec.cpu_cores
                else 1.0
            ),
            ram_residual=(
                (self.spec.ram_gb - ram) / self.spec.ram_gb if self.spec.ram_gb else 1.0
            ),
            image_backlog_share=(image / total if total > 0 else 0.0),
        )


class World:
    """Whole-cluster runtime: nodes, clock, ledger, audits and the event log."""

    def __init__(self, config: SimConfig):
        self.config = config
        self.lms = {lm.id: lm for lm in config.lms}
        self.links = LinkTable(config.links, config.default_link)
        self.nodes: dict[str, NodeRuntime] = {
            s.id: NodeRuntime(s, self) for s in config.servers
        }
        self.ledger: list[Request] = []
        self.event_log: list[str] = []
        self.routing_log: list[tuple[int, int, str, bool]] = []  # slot, lm, dest, on_role
        self._resolved_buffer: list[Request] = []
        self.arrivals_total = 0
        self.resolved_total = 0
        self.arrivals_by_lm: dict[int, int] = {lm: 0 for lm in config.lm_ids}
        self.resolved_by_lm: dict[int, int] = {lm: 0 for lm in config.lm_ids}
        self._per_prompt_cache: dict[tuple[int, Placement], float] = {}
        self._feasible_cache: dict[int, set[str]] = {
            lm.id: feasible_nodes(lm, config.servers) for lm in config.lms
        }
        self.current_slot = 0

    # -- helpers -------------------------------------------------------------
    def log(self, when: float, node: str, kind: str, req_id, detail: str = "") -> None:
        self.event_log.append(f"{when:.6f}\t{node}\t{kind}\t{req_id}\t{detail}")

    def per_prompt(self, lm_id: int, mode: Placement) -> float:
        key = (lm_id, mode)
        if key not in self._per_prompt_cache:
            self._per_prompt_cache[key] = per_prompt_seconds(self.lms[lm_id], mode)
        return self._per_prompt_cache[key]

    def feasible(self, lm_id: int) -> set[str]:
        return self._feasible_cache[lm_id]

    def in_flight(self) -> int:
        return self.arrivals_total - self.resolved_total

    def _resolve(self, req: Request, when: float, outcome: str, reason=None) -> None:
        if req.outcome != "pending":
            raise EngineInvariantError(f"request {req.request_id} resolved twice")
        req.outcome = outcome
        req.fail_reason = reason
        req.resolve_time = when
        req.resolved_slot = self.current_slot
        if outcome == "success":
            req.t_q = when - req.arrival_time
            self._audit_no_reprocessing(req)
        self.resolved_total += 1
        self.resolved_by_lm[req.lm_type] += 1
        self._resolved_buffer.append(req)
        self.log(when, req.dispatched_to or req.origin_node, outcome, req.request_id,
                 reason or f"T_q={req.t_q}")

    def _audit_no_reprocessing(self, req: Request) -> None:
        required = sum(
            n * self.per_prompt(req.lm_type, mode) for mode, n in req.segments.items()
        )
        if abs(req.infer_s - required) > 1e-9 or req.progress != req.k_prompts:
            raise EngineInvariantError(
                f"request {req.request_id}: inference accounting off "
                f"({req.infer_s} vs {required}, progress {req.progress}/{req.k_prompts})"
            )


# --------------------------------------------------------------------------
# routing
# --------------------------------------------------------------------------

def apply_routing(
    world: World,
    routing: dict[tuple[str, int], str],
    arrivals: list[Request],
    slot: int,
) -> None:
    """Dispatch this slot's arrivals along the frozen routing matrix.

    Each request gets its uplink delay and an enqueue event at its target;
    a missing matrix entry falls back to local processing (logged).  Types
    with an empty feasible set fail immediately as never-deployable.
    """
    slot_start = slot * world.config.slot_seconds
    for req in arrivals:
        world.ledger.append(req)
        world.arrivals_total += 1
        world.arrivals_by_lm[req.lm_type] += 1
        req.arrival_time = slot_start

        if not world.feasible(req.lm_type):
            req.dispatched_to = req.origin_node
            world._resolve(req, slot_start, "failed", FAIL_NEVER_DEPLOYABLE)
            continue

        dest = routing.get((req.origin_node, req.lm_type))
        if dest is None:
            dest = req.origin_node
            world.log(slot_start, req.origin_node, "route_fallback", req.request_id,
                      "missing routing entry; kept local")
        req.dispatched_to = dest
        lm = world.lms[req.lm_type]
        req.uplink_s = world.links.delay(
            req.origin_node, dest, req.k_prompts * lm.prompt_bytes
        )
        world.nodes[dest].push_event(slot_start + req.uplink_s, "enqueue", req)


# --------------------------------------------------------------------------
# deployment
# --------------------------------------------------------------------------

def _checkpoint_and_requeue(node: NodeRuntime, rep: ReplicaState, now: float) -> None:
    req = rep.serving
    if req is None:
        return
    rep.serving = None
    rep.serial += 1
    # progress already counts only completed prompts; partially served prompt
    # time is abandoned, the prompt will be redone after restart
    node.queues[rep.lm_type].appendleft(req)
    node.world.log(now, node.spec.id, "checkpoint", req.request_id,
                   f"progress={req.progress}/{req.k_prompts}")


def _start_replica(node: NodeRuntime, lm_id: int, mode: Placement, now: float) -> None:
    lm = node.world.lms[lm_id]
    delay = startup_delay(lm, mode)
    rep = ReplicaState(
        lm_type=lm_id,
        mode=mode,
        phase=STARTING,
        phase_end=now + delay,
        per_prompt_s=node.world.per_prompt(lm_id, mode),
    )
    node.replicas[lm_id] = rep
    node.push_event(rep.phase_end, "phase", (lm_id, STARTING))
    node.world.log(now, node.spec.id, "replica_starting", lm_id,
                   f"{mode.kind}x{mode.units} ready_at={rep.phase_end:.3f}")


def _stop_replica(node: NodeRuntime, rep: ReplicaState, now: float) -> None:
    if rep.phase == PENDING:
        del node.replicas[rep.lm_type]  # never held anything
        node.world.log(now, node.spec.id, "replica_cancelled", rep.lm_type, "")
        return
    _checkpoint_and_requeue(node, rep, now)
    lm = node.world.lms[rep.lm_type]
    rep.phase = TERMINATING
    rep.phase_end = now + termination_delay(lm)
    node.push_event(rep.phase_end, "phase", (rep.lm_type, TERMINATING))
    node.world.log(now, node.spec.id, "replica_terminating", rep.lm_type,
                   f"releases_at={rep.phase_end:.3f}")


def apply_deployment(
    node: NodeRuntime, action: DeploymentAction, now: float
) -> NodeRuntime:
    """Reconcile a node towards the target activation state.

    Statically infeasible actions are rejected atomically.  While any replica
    is pending or starting, sub-actions that would consume extra resources
    are voided.  Starts blocked only by terminating holds become pending
    replicas and promote once those resources free up.
    """
    world = node.world
    target = action.as_dict()

    from .model import check_headroom  # local import avoids cycle at module load

    if not check_headroom(node.spec, action, world.lms):
        world.log(now, node.spec.id, "action_rejected", "-",
                  "target state violates resource budgets")
        return node

    blocked = node.transient()

    # stops (and the stop half of restarts) go first: they only free resources
    for lm_id, rep in list(sorted(node.replicas.items())):
        if rep.phase == TERMINATING:
            continue
        want = target.get(lm_id)
        if want == rep.mode:
            continue
        if want is not None and blocked:
            # a restart needs new resources; void it whole rather than killing
            # the live replica and failing to replace it
            world.log(now, node.spec.id, "action_voided", lm_id,
                      "restart while node has pending/starting replicas")
            continue
        if want is not None and rep.phase == PENDING:
            # re-aim the pending replica instead of stop+start
            node.replicas[lm_id] = ReplicaState(lm_type=lm_id, mode=want, phase=PENDING)
            world.log(now, node.spec.id, "pending_retargeted", lm_id, "")
            continue
        _stop_replica(node, rep, now)

    for lm_id in sorted(target):
        mode = target[lm_id]
        existing = node.replicas.get(lm_id)
        if existing is not None and existing.phase != TERMINATING:
            continue  # already live at the right mode, or retargeted above
        if blocked:
            world.log(now, node.spec.id, "action_voided", lm_id,
                      "start while node has pending/starting replicas")
            continue
        if existing is not None:
            # one replica per (node, LM): wait out the terminating pod
            world.log(now, node.spec.id, "start_deferred", lm_id,
                      "previous replica still terminating")
            continue
        if node.fits(world.lms[lm_id], mode):
            _start_replica(node, lm_id, mode, now)
        else:
            node.replicas[lm_id] = ReplicaState(lm_type=lm_id, mode=mode, phase=PENDING)
            world.log(now, node.spec.id, "replica_pending", lm_id,
                      f"{mode.kind}x{mode.units} awaiting resources")
    node.assert_resource_safety()
    return node


def _promote_pending(node: NodeRuntime, now: float) -> None:
    for lm_id in sorted(node.replicas):
        rep = node.replicas[lm_id]
        if rep.phase != PENDING:
            continue
        if node.fits(node.world.lms[lm_id], rep.mode):
            mode = rep.mode
            del node.replicas[lm_id]
            _start_replica(node, lm_id, mode, now)


# --------------------------------------------------------------------------
# advancing time
# --------------------------------------------------------------------------

def _try_dispatch(node: NodeRuntime, lm_id: int, now: float) -> None:
    rep = node.replicas.get(lm_id)
    if rep is None or rep.phase != RUNNING or rep.serving is not None:
        return
    queue = node.queues[lm_id]
    if not queue:
        return
    req = queue.popleft()
    if req.first_service_time is None:
        req.first_service_time = now
    rep.serving = req
    rep.serial += 1
    node.push_event(now + rep.per_prompt_s, "prompt", (lm_id, rep.serial))
    node.world.log(now, node.spec.id, "service_start", req.request_id,
                   f"remaining={req.k_prompts - req.progress}")


def _finish_inference(node: NodeRuntime, rep: ReplicaState, req: Request, now: float) -> None:
    world = node.world
    lm = world.lms[req.lm_type]
    rep.serving = None
    rep.serial += 1
    req.downlink_s = world.links.delay(
        node.spec.id, req.origin_node, req.k_prompts * lm.result_bytes
    )
    completion = now + req.downlink_s
    deadline = req.arrival_time + world.config.tau_seconds
    if completion <= deadline:
        node.push_event(completion, "complete", req)
    # else: the request can no longer make it; its deadline event fails it
    _try_dispatch(node, req.lm_type, now)


def _fail_deadline(node: NodeRuntime, req: Request, when: float) -> None:
    # drop the request from wherever it currently sits
    lm_id = req.lm_type
    rep = node.replicas.get(lm_id)
    if rep is not None and rep.serving is req:
        rep.serving = None
        rep.serial += 1
        node.world._resolve(req, when, "failed", FAIL_DEADLINE)
        _try_dispatch(node, lm_id, when)
        return
    try:
        node.queues[lm_id].remove(req)
    except ValueError:
        pass  # in downlink flight or awaiting enqueue
    node.world._resolve(req, when, "failed", FAIL_DEADLINE)


def advance(node: NodeRuntime, until: float) -> None:
    """Process every event on this node's heap up to and including ``until``."""
    world = node.world
    events = node._events
    while events and events[0][0] <= until:
        when, _, _, kind, payload = heapq.heappop(events)

        if kind == "enqueue":
            req: Request = payload
            req.enqueue_time = when
            node.queues[req.lm_type].append(req)
            node.push_event(
                req.arrival_time + world.config.tau_seconds, "deadline", req
            )
            world.log(when, node.spec.id, "enqueue", req.request_id, f"k={req.k_prompts}")
            _try_dispatch(node, req.lm_type, when)

        elif kind == "phase":
            lm_id, from_phase = payload
            rep = node.replicas.get(lm_id)
            if rep is None or rep.phase != from_phase or rep.phase_end != when:
                continue  # superseded transition
            if from_phase == STARTING:
                rep.phase = RUNNING
                rep.phase_end = None
                world.log(when, node.spec.id, "replica_running", lm_id, "")
                _try_dispatch(node, lm_id, when)
            elif from_phase == TERMINATING:
                del node.replicas[lm_id]
                world.log(when, node.spec.id, "replica_gone", lm_id, "")
                _promote_pending(node, when)
            node.assert_resource_safety()

        elif kind == "prompt":
            lm_id, serial = payload
            rep = node.replicas.get(lm_id)
            if rep is None or rep.serial != serial or rep.serving is None:
                continue  # interrupted service; event is stale
            req = rep.serving
            req.progress += 1
            req.infer_s += rep.per_prompt_s
            req.segments[rep.mode] = req.segments.get(rep.mode, 0) + 1
            if req.progress >= req.k_prompts:
                _finish_inference(node, rep, req, when)
            else:
                node.push_event(when + rep.per_prompt_s, "prompt", (lm_id, serial))

        elif kind == "deadline":
            req = payload
            if req.outcome == "pending":
                _fail_deadline(node, req, when)

        elif kind == "complete":
            req = payload
            if req.outcome == "pending":
                world._resolve(req, when, "success")


# --------------------------------------------------------------------------
# slot / epoch drivers
# --------------------------------------------------------------------------

SchedulerFn = Callable[[ClusterSnapshot, list[Request], int], dict]
DeployerFn = Callable[[NodeSnapshot], Optional[DeploymentAction]]


def cluster_snapshot(world: World, slot: int, policy=None) -> ClusterSnapshot:
    return ClusterSnapshot(
        slot=slot,
        nodes={nid: node.snapshot(slot) for nid, node in world.nodes.items()},
        policy=policy,
    )


def run_slot(
    world: World,
    slot: int,
    scheduler: SchedulerFn,
    deployers: dict[str, DeployerFn],
    arrivals: list[Request],
    policy: Optional[MacroPolicy] = None,
) -> SlotOutcome:
    """One control period: route, deploy, then advance every node by a slot."""
    world.current_slot = slot
    slot_start = slot * world.config.slot_seconds
    slot_end = slot_start + world.config.slot_seconds

    snapshot = cluster_snapshot(world, slot, policy)

    try:
        routing = scheduler(snapshot, arrivals, slot) or {}
    except Exception as exc:  # policy errors degrade to local routing
        log.warning("scheduler failed on slot %d: %s", slot, exc)
        world.log(slot_start, "-", "scheduler_error", "-", str(exc))
        routing = {}

    apply_routing(world, routing, arrivals, slot)
    if policy is not None:
        for req in arrivals:
            if req.dispatched_to is not None and req.outcome == "pending":
                on_role = req.lm_type in policy.role_of(req.dispatched_to)
                world.routing_log.append((slot, req.lm_type, req.dispatched_to, on_role))

    for node_id, node in world.nodes.items():
        deployer = deployers.get(node_id)
        if deployer is None:
            continue
        try:
            action = deployer(snapshot.nodes[node_id])
        except Exception as exc:
            log.warning("deployer %s failed on slot %d: %s", node_id, slot, exc)
            world.log(slot_start, node_id, "deployer_error", "-", str(exc))
            action = None
        if action is not None:
            apply_deployment(node, action, slot_start)

    for node in world.nodes.values():
        advance(node, slot_end)

    outcome = SlotOutcome(slot=slot, arrivals=len(arrivals))
    for req in world._resolved_buffer:
        (outcome.completed if req.outcome == "success" else outcome.failed).append(req)
    world._resolved_buffer.clear()
    outcome.backlog = {
        nid: {lm: node.backlog_prompts(lm) for lm in world.config.lm_ids}
        for nid, node in world.nodes.items()
    }
    outcome.resources = {nid: node.held() for nid, node in world.nodes.items()}
    outcome.arrivals_total = world.arrivals_total
    outcome.resolved_total = world.resolved_total
    outcome.in_flight = world.in_flight()
    if outcome.arrivals_total != outcome.resolved_total + outcome.in_flight:
        raise EngineInvariantError("conservation audit failed at slot boundary")
    return outcome


def run_epoch(
    world: World,
    epoch: int,
    planner: Optional[Callable[[int], Optional[MacroPolicy]]],
    scheduler: SchedulerFn,
    deployers: dict[str, DeployerFn],
    arrivals_for: Callable[[int], list[Request]],
    previous_policy: Optional[MacroPolicy] = None,
) -> tuple[EpochTelemetry, list[SlotOutcome], Optional[MacroPolicy]]:
    """Run one planning period: invoke the planner once, then every slot.

    Telemetry aggregates the requests that resolved during this epoch's
    window (delayed-feedback attribution), not those that arrived in it.
    """
    policy = previous_policy
    if planner is not None:
        try:
            new_policy = planner(epoch)
            if new_policy is not None:
                policy = new_policy
        except Exception as exc:
            log.warning("planner failed on epoch %d: %s; keeping previous policy",
                        epoch, exc)
            world.log(epoch * world.config.slots_per_epoch * world.config.slot_seconds,
                      "-", "planner_error", "-", str(exc))

    spe = world.config.slots_per_epoch
    outcomes = []
    epoch_rows: list[Request] = []
    arrival_counts = {lm: 0 for lm in world.config.lm_ids}
    routing_mark = len(world.routing_log)
    for slot in range(epoch * spe, (epoch + 1) * spe):
        arrivals = arrivals_for(slot)
        for req in arrivals:
            arrival_counts[req.lm_type] += 1
        outcome = run_slot(world, slot, scheduler, deployers, arrivals, policy)
        outcomes.append(outcome)
        epoch_rows.extend(outcome.completed)
        epoch_rows.extend(outcome.failed)

    backlog_mean: dict[str, dict[int, float]] = {}
    for nid in world.nodes:
        backlog_mean[nid] = {
            lm: sum(o.backlog[nid][lm] for o in outcomes) / len(outcomes)
            for lm in world.config.lm_ids
        }
    routing_entries = [
        (lm, dest, on_role)
        for (_, lm, dest, on_role) in world.routing_log[routing_mark:]
    ]
    telemetry = build_epoch_telemetry(
        epoch_rows,
        routing_entries,
        policy,
        epoch=epoch,
        lm_ids=world.config.lm_ids,
        tau=world.config.tau_seconds,
        lam=world.config.lambda_weight,
        arrival_counts=arrival_counts,
        node_backlog_mean=backlog_mean,
    )
    return telemetry, outcomes, policy


def drain(
    world: World,
    first_slot: int,
    scheduler: SchedulerFn,
    deployers: dict[str, DeployerFn],
    max_slots: int = 64,
) -> list[SlotOutcome]:
    """Run arrival-free slots until every in-flight request resolves.

    Bounded by tau plus lifecycle slack; used at run end so run-level rates
    cover complete cohorts.
    """
    outcomes = []
    slot = first_slot
    while world.in_flight() > 0 and slot < first_slot + max_slots:
        outcomes.append(run_slot(world, slot, scheduler, deployers, []))
        slot += 1
    if world.in_flight() > 0:
        raise EngineInvariantError("drain did not settle; requests leaked")
    return outcomes
