"""edgellm: deterministic simulator and policy library for fair,
latency-aware multi-model inference scheduling on edge server clusters."""

from .model import (
    ConfigError,
    DeploymentAction,
    LMTypeSpec,
    MacroPolicy,
    Placement,
    Request,
    ServerSpec,
    SimConfig,
    TopologyLink,
    WorkloadSpec,
    check_headroom,
    feasible_nodes,
    on_cpu,
    on_gpu,
    validate_config,
)
from .latency import inference_latency, startup_delay, termination_delay, transmission_delay
from .metrics import (
    EpochTelemetry,
    composite_objective,
    jain,
    normalize_fairness,
    normalized_latency,
    service_rates,
    slot_reward,
)
from .baselines import DppParams, calibrate_dpp, dpp_select
from .engine import World, run_slot, run_epoch
from .experiments import RunManifest, Simulation, run_manifest
from .scenario import load_scenario

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DeploymentAction", "LMTypeSpec", "MacroPolicy", "Placement",
    "Request", "ServerSpec", "SimConfig", "TopologyLink", "WorkloadSpec",
    "check_headroom", "feasible_nodes", "on_cpu", "on_gpu", "validate_config",
    "inference_latency", "startup_delay", "termination_delay", "transmission_delay",
    "EpochTelemetry", "composite_objective", "jain", "normalize_fairness",
    "normalized_latency", "service_rates", "slot_reward",
    "DppParams", "calibrate_dpp", "dpp_select",
    "World", "run_slot", "run_epoch",
    "RunManifest", "Simulation", "run_manifest", "load_scenario",
    "__version__",
]
