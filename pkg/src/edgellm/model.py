"""Core domain types: model catalog, server fleet, requests, placements and
configuration validation.

Everything in here is a plain value type.  Nothing mutates shared state, so
all of it is safe to hand to policies, the engine and tests alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional

MODALITIES = ("text->text", "text->image", "image->text")

#: k_prompts support upper bound (a request is a batch of 1..K_MAX prompts).
K_MAX = 8


class ConfigError(ValueError):
    """Raised when a configuration fails validation.

    ``violations`` holds one human-readable message per offending field.
    """

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass
class LMTypeSpec:
    """One service/model type (e.g. a small text generator, an image model)."""

    id: int
    name: str
    modality: str
    min_ram_gb: float
    min_vram_gb: float
    deploy_ram_gb: float
    cpu_feasible: bool
    gpu_base_seconds_per_prompt: float
    cpu_base_seconds_per_prompt: float  # inf when cpu_feasible is False
    gpu_speedup_exponent: float = 1.0
    cpu_speedup_exponent: float = 0.6
    startup_seconds_gpu: float = 20.0
    startup_seconds_cpu: float = 15.0
    termination_seconds: float = 10.0
    prompt_bytes: int = 1024
    result_bytes: int = 2048
    storage_gb: float = 0.0  # recorded for reporting, never enforced

    @property
    def is_image(self) -> bool:
        return self.modality in ("text->image", "image->text")


@dataclass
class ServerSpec:
    """Static capacities of one edge server (a cluster node)."""

    id: str
    cpu_cores: int
    ram_gb: float
    vgpu_units: int
    vram_gb: float
    gpu_capable: bool
    control_node: bool = False  # control nodes host agents, never replicas


@dataclass
class TopologyLink:
    src: str
    dst: str
    bandwidth_bytes_per_s: float
    rtt_seconds: float = 0.0


@dataclass(frozen=True)
class Placement:
    """A compute placement for one replica: some CPU cores or some vGPUs."""

    kind: str  # "cpu" | "gpu"
    units: int

    def __post_init__(self):
        if self.kind not in ("cpu", "gpu"):
            raise ValueError(f"bad placement kind {self.kind!r}")
        if self.units < 1:
            raise ValueError("placement units must be >= 1")

    @property
    def is_gpu(self) -> bool:
        return self.kind == "gpu"

    def sort_key(self) -> tuple[int, int]:
        # Off sorts before Cpu before Gpu; smaller allocations first.
        return (1 if self.kind == "cpu" else 2, self.units)


def on_cpu(cores: int) -> Placement:
    return Placement("cpu", cores)


def on_gpu(vgpus: int) -> Placement:
    return Placement("gpu", vgpus)


_OFF_KEY = (0, 0)


@dataclass(frozen=True)
class DeploymentAction:
    """Target activation state for one node: per-LM placement, Off omitted."""

    placements: tuple[tuple[int, Placement], ...]

    @staticmethod
    def from_dict(mapping: Mapping[int, Optional[Placement]]) -> "DeploymentAction":
        items = tuple(
            sorted((lm, p) for lm, p in mapping.items() if p is not None)
        )
        return DeploymentAction(items)

    def get(self, lm_id: int) -> Optional[Placement]:
        for lm, p in self.placements:
            if lm == lm_id:
                return p
        return None

    def as_dict(self) -> dict[int, Placement]:
        return dict(self.placements)

    @property
    def active_ids(self) -> frozenset[int]:
        return frozenset(lm for lm, _ in self.placements)

    def canonical_key(self, lm_ids: Iterable[int]) -> tuple:
        """Total-order key over a fixed LM universe, used for tie-breaking."""
        d = self.as_dict()
        return tuple(
            d[lm].sort_key() if lm in d else _OFF_KEY for lm in sorted(lm_ids)
        )


EMPTY_ACTION = DeploymentAction(())


@dataclass
class Request:
    """A batch of same-type prompts arriving at one node in one slot."""

    request_id: int
    lm_type: int
    origin_node: str
    arrival_slot: int
    k_prompts: int
    dispatched_to: Optional[str] = None
    progress: int = 0  # prompts completed so far (survives replica restarts)

    # timeline bookkeeping (all in simulated seconds)
    arrival_time: float = 0.0
    uplink_s: float = 0.0
    enqueue_time: Optional[float] = None
    first_service_time: Optional[float] = None
    infer_s: float = 0.0  # accumulated completed-prompt service seconds
    downlink_s: float = 0.0
    resolve_time: Optional[float] = None
    resolved_slot: Optional[int] = None

    outcome: str = "pending"  # pending | success | failed
    fail_reason: Optional[str] = None
    t_q: Optional[float] = None
    # prompts completed per placement, for checkpoint-exact accounting
    segments: dict = field(default_factory=dict)

    @property
    def delta(self) -> int:
        return 1 if self.outcome == "success" else 0

    @property
    def queue_s(self) -> Optional[float]:
        if self.t_q is None:
            return None
        return self.t_q - self.uplink_s - self.infer_s - self.downlink_s


@dataclass
class MacroPolicy:
    """Epoch-level plan: per-LM routing probabilities plus node role sets."""

    routing_probs: dict[int, dict[str, float]]
    node_roles: dict[str, frozenset]

    def role_of(self, node_id: str) -> frozenset:
        return self.node_roles.get(node_id, frozenset())


@dataclass
class WorkloadSpec:
    """Arrival process parameters (the generator itself lives in workload.py).

    ``presence_prob`` is the chance that a given (node, LM) pair spawns a
    request draw in a slot; a scalar applies to every LM, a mapping sets it
    per LM id.  ``k_weights`` optionally reweights the 0..k_max prompt-count
    support (index 0 means "no request").
    """

    presence_prob: Any = 0.18  # float or {lm_id: float}
    k_max: int = K_MAX
    k_weights: Optional[list[float]] = None
    drift: list[dict] = field(default_factory=list)  # [{"epoch": e, "scale": {lm: f}}]
    trace_path: Optional[str] = None

    def presence_for(self, lm_id: int, epoch: int = 0) -> float:
        base = self.presence_prob
        if isinstance(base, Mapping):
            p = float(base.get(lm_id, 0.0))
        else:
            p = float(base)
        for entry in self.drift:
            if epoch >= int(entry.get("epoch", 0)):
                p *= float(entry.get("scale", {}).get(lm_id, 1.0))
        return min(1.0, max(0.0, p))

    def mean_k(self) -> float:
        """Mean of the raw k draw, zeros included."""
        if self.k_weights:
            total = sum(self.k_weights)
            return sum(k * w for k, w in enumerate(self.k_weights)) / total
        return self.k_max / 2.0


@dataclass
class SimConfig:
    """Full scenario description; mirrors the on-disk scenario schema."""

    servers: list[ServerSpec]
    lms: list[LMTypeSpec]
    links: list[TopologyLink] = field(default_factory=list)
    default_link: Optional[TopologyLink] = None
    slot_seconds: float = 30.0
    slots_per_epoch: int = 50
    tau_seconds: float = 900.0
    lambda_weight: float = 0.5
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    policy: str = "MA"
    seed: int = 0
    dpp: Any = None  # DppParams; attached by the scenario loader
    initial_policy: Optional[MacroPolicy] = None
    reroute_backlog_factor: float = 1.5
    planner_shift_cap: float = 0.15
    retrieval_k: int = 4

    def server(self, node_id: str) -> ServerSpec:
        for s in self.servers:
            if s.id == node_id:
                return s
        raise KeyError(node_id)

    def lm(self, lm_id: int) -> LMTypeSpec:
        for lm in self.lms:
            if lm.id == lm_id:
                return lm
        raise KeyError(lm_id)

    @property
    def lm_ids(self) -> list[int]:
        return sorted(lm.id for lm in self.lms)

    @property
    def worker_ids(self) -> list[str]:
        return [s.id for s in self.servers if not s.control_node]


def feasible_nodes(lm: LMTypeSpec, servers: Iterable[ServerSpec]) -> set[str]:
    """Nodes where the LM could ever be placed.

    GPU-capable nodes always qualify; CPU-only nodes only when the LM runs on
    CPU and its provisioned memory fits.  Control nodes never host replicas.
    """
    out = set()
    for s in servers:
        if s.control_node:
            continue
        if s.gpu_capable:
            out.add(s.id)
        elif lm.cpu_feasible and lm.deploy_ram_gb <= s.ram_gb:
            out.add(s.id)
    return out


def check_headroom(
    node: ServerSpec, action: DeploymentAction, lms: Mapping[int, LMTypeSpec]
) -> bool:
    """True iff the action's resource sums fit within the node's budgets.

    vGPU and core sums run over the respective placements, provisioned RAM
    over every active LM, and vRAM floors over GPU-placed replicas only.
    """
    vgpus = cores = 0
    ram = vram = 0.0
    for lm_id, placement in action.placements:
        lm = lms[lm_id]
        ram += lm.deploy_ram_gb
        if placement.is_gpu:
            vgpus += placement.units
            vram += lm.min_vram_gb
        else:
            cores += placement.units
    return (
        vgpus <= node.vgpu_units
        and cores <= node.cpu_cores
        and ram <= node.ram_gb + 1e-9
        and vram <= node.vram_gb + 1e-9
    )


def placement_feasible(node: ServerSpec, lm: LMTypeSpec, placement: Placement) -> bool:
    """Per-LM feasibility of a single placement on a node, ignoring co-tenants."""
    if node.control_node:
        return False
    if placement.is_gpu:
        return (
            node.gpu_capable
            and placement.units <= node.vgpu_units
            and lm.min_vram_gb <= node.vram_gb
            and lm.deploy_ram_gb <= node.ram_gb
        )
    return (
        lm.cpu_feasible
        and placement.units <= node.cpu_cores
        and lm.deploy_ram_gb <= node.ram_gb
    )


def macro_policy_violations(policy: MacroPolicy, config: SimConfig) -> list[str]:
    """Why a macro policy is invalid, empty when it is well formed.

    Checks the three validity conditions: per-LM probability rows over the
    feasible node set, zero mass on infeasible nodes, and per-node role sets
    that are jointly deployable at minimum allocations.
    """
    errors: list[str] = []
    lm_map = {lm.id: lm for lm in config.lms}
    node_ids = {s.id for s in config.servers}

    for lm_id in config.lm_ids:
        row = policy.routing_probs.get(lm_id)
        if row is None:
            errors.append(f"routing_probs[{lm_map[lm_id].name}]: missing row")
            continue
        feas = feasible_nodes(lm_map[lm_id], config.servers)
        total = 0.0
        for node, p in row.items():
            if node not in node_ids:
                errors.append(
                    f"routing_probs[{lm_map[lm_id].name}][{node}]: unknown node"
                )
                continue
            if not isinstance(p, (int, float)) or math.isnan(p) or p < 0:
                errors.append(
                    f"routing_probs[{lm_map[lm_id].name}][{node}]: bad probability {p!r}"
                )
                continue
            if p > 0 and node not in feas:
                errors.append(
                    f"routing_probs[{lm_map[lm_id].name}][{node}]: mass on infeasible node"
                )
            total += p
        if abs(total - 1.0) > 1e-6:
            errors.append(
                f"routing_probs[{lm_map[lm_id].name}]: probabilities sum to {total:.6f}, not 1"
            )
    for lm_id in policy.routing_probs:
        if lm_id not in lm_map:
            errors.append(f"routing_probs[{lm_id}]: unknown LM id")

    for node_id, roles in policy.node_roles.items():
        if node_id not in node_ids:
            errors.append(f"node_role_intent[{node_id}]: unknown node")
            continue
        node = config.server(node_id)
        mins: dict[int, Optional[Placement]] = {}
        for lm_id in roles:
            if lm_id not in lm_map:
                errors.append(f"node_role_intent[{node_id}]: unknown LM id {lm_id}")
                continue
            lm = lm_map[lm_id]
            if node_id not in feasible_nodes(lm, config.servers):
                errors.append(
                    f"node_role_intent[{node_id}]: {lm.name} cannot run on this node"
                )
                continue
            # minimum viable allocation: one core if CPU works here, else one vGPU
            if lm.cpu_feasible and node.cpu_cores >= 1:
                mins[lm_id] = on_cpu(1)
            else:
                mins[lm_id] = on_gpu(1)
        if len(mins) == len(roles):
            action = DeploymentAction.from_dict(mins)
            if not check_headroom(node, action, lm_map):
                errors.append(
                    f"node_role_intent[{node_id}]: role set exceeds node capacity"
                )
    return errors


def config_violations(config: SimConfig) -> list[str]:
    """Every invariant violation in the scenario, one message per field."""
    errors: list[str] = []

    seen_nodes: set[str] = set()
    for s in config.servers:
        where = f"servers[{s.id}]"
        if s.id in seen_nodes:
            errors.append(f"{where}: duplicate node id")
        seen_nodes.add(s.id)
        if s.cpu_cores < 0 or s.ram_gb < 0:
            errors.append(f"{where}: negative capacity")
        gpu_flags = (s.gpu_capable, s.vgpu_units > 0, s.vram_gb > 0)
        if len(set(gpu_flags)) != 1:
            errors.append(f"{where}: gpu capability inconsistent")
        if s.vgpu_units % 2 != 0:
            errors.append(
                f"{where}.vgpu_units: physical GPUs split into exactly 2 vGPUs each"
            )

    seen_lms: set[int] = set()
    for lm in config.lms:
        where = f"lms[{lm.name}]"
        if lm.id in seen_lms:
            errors.append(f"{where}: duplicate LM id")
        seen_lms.add(lm.id)
        if lm.modality not in MODALITIES:
            errors.append(f"{where}.modality: unknown modality {lm.modality!r}")
        if lm.min_ram_gb < 0 or lm.min_vram_gb <= 0:
            errors.append(f"{where}: memory floors must be positive")
        if lm.deploy_ram_gb < lm.min_ram_gb:
            errors.append(f"{where}.deploy_ram_gb: below min_ram_gb")
        if not lm.cpu_feasible and math.isfinite(lm.cpu_base_seconds_per_prompt):
            errors.append(
                f"{where}.cpu_base_seconds_per_prompt: must be inf when cpu_feasible is false"
            )
        if lm.gpu_base_seconds_per_prompt <= 0:
            errors.append(f"{where}.gpu_base_seconds_per_prompt: must be > 0")
        if lm.cpu_feasible and lm.cpu_base_seconds_per_prompt <= 0:
            errors.append(f"{where}.cpu_base_seconds_per_prompt: must be > 0")
        for name in ("gpu_speedup_exponent", "cpu_speedup_exponent"):
            v = getattr(lm, name)
            if not (0 < v <= 1):
                errors.append(f"{where}.{name}: must lie in (0, 1]")
        if lm.startup_seconds_gpu < 0 or lm.startup_seconds_cpu < 0:
            errors.append(f"{where}: startup delays must be >= 0")
        if lm.termination_seconds < 0:
            errors.append(f"{where}.termination_seconds: must be >= 0")
        if lm.prompt_bytes <= 0 or lm.result_bytes <= 0:
            errors.append(f"{where}: payload sizes must be positive")

    for link in config.links:
        where = f"links[{link.src}->{link.dst}]"
        if link.src not in seen_nodes or link.dst not in seen_nodes:
            errors.append(f"{where}: unresolved node id")
        if link.bandwidth_bytes_per_s <= 0:
            errors.append(f"{where}.bandwidth_bytes_per_s: must be > 0")
        if link.rtt_seconds < 0:
            errors.append(f"{where}.rtt_seconds: must be >= 0")

    if config.slot_seconds <= 0:
        errors.append("slot_seconds: must be > 0")
    if config.tau_seconds < config.slot_seconds:
        errors.append("tau_seconds: must be >= slot_seconds")
    if config.slots_per_epoch < 1:
        errors.append("slots_per_epoch: must be >= 1")
    if not (0 <= config.lambda_weight <= 1):
        errors.append("lambda_weight: must lie in [0, 1]")

    wl = config.workload
    probs = (
        wl.presence_prob.values()
        if isinstance(wl.presence_prob, Mapping)
        else [wl.presence_prob]
    )
    for p in probs:
        if not (0 <= float(p) <= 1):
            errors.append("workload.presence_prob: must lie in [0, 1]")
    if wl.k_max < 1 or wl.k_max > K_MAX:
        errors.append(f"workload.k_max: must lie in [1, {K_MAX}]")
    if wl.k_weights is not None and len(wl.k_weights) != wl.k_max + 1:
        errors.append("workload.k_weights: needs one weight per k in 0..k_max")

    if config.initial_policy is not None and not errors:
        errors.extend(
            f"initial_policy: {msg}"
            for msg in macro_policy_violations(config.initial_policy, config)
        )
    return errors


def validate_config(config: SimConfig) -> SimConfig:
    """Return the config unchanged iff every invariant holds.

    Raises ConfigError carrying the full violation list otherwise, so callers
    can surface every problem at once.  Idempotent by construction.
    """
    violations = config_violations(config)
    if violations:
        raise ConfigError(violations)
    return config
