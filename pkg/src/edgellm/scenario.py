"""Scenario files: a YAML key/value tree whose schema mirrors SimConfig
field names, plus loaders for DPP parameter files written by calibration.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Optional

import yaml

from .baselines import DppParams, default_dpp_params
from .model import (
    LMTypeSpec,
    MacroPolicy,
    ServerSpec,
    SimConfig,
    TopologyLink,
    WorkloadSpec,
    validate_config,
)


def _lm_name_to_id(raw_lms: list[dict]) -> dict[str, int]:
    out = {}
    for entry in raw_lms:
        out[str(entry["name"])] = int(entry["id"])
        out[str(entry["id"])] = int(entry["id"])
    return out


def _per_lm_map(raw, namemap: Mapping[str, int], cast=float):
    if raw is None:
        return None
    if isinstance(raw, Mapping):
        return {namemap[str(k)]: cast(v) for k, v in raw.items()}
    return cast(raw)


def load_scenario(path, validate: bool = True) -> SimConfig:
    """Parse a scenario file into a validated SimConfig."""
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}

    servers = [
        ServerSpec(
            id=str(s["id"]),
            cpu_cores=int(s["cpu_cores"]),
            ram_gb=float(s["ram_gb"]),
            vgpu_units=int(s.get("vgpu_units", 0)),
            vram_gb=float(s.get("vram_gb", 0)),
            gpu_capable=bool(s.get("gpu_capable", s.get("vgpu_units", 0) > 0)),
            control_node=bool(s.get("control_node", False)),
        )
        for s in raw.get("servers", [])
    ]

    raw_lms = raw.get("lms", [])
    namemap = _lm_name_to_id(raw_lms)
    latency = raw.get("latency", {})
    lms = []
    for entry in raw_lms:
        lat = dict(latency.get(str(entry["name"]), latency.get(str(entry["id"]), {})))
        merged = {**entry, **lat}
        cpu_base = merged.get("cpu_base_seconds_per_prompt", float("inf"))
        lms.append(
            LMTypeSpec(
                id=int(merged["id"]),
                name=str(merged["name"]),
                modality=str(merged["modality"]),
                min_ram_gb=float(merged["min_ram_gb"]),
                min_vram_gb=float(merged["min_vram_gb"]),
                deploy_ram_gb=float(merged["deploy_ram_gb"]),
                cpu_feasible=bool(merged["cpu_feasible"]),
                gpu_base_seconds_per_prompt=float(merged["gpu_base_seconds_per_prompt"]),
                cpu_base_seconds_per_prompt=float(cpu_base),
                gpu_speedup_exponent=float(merged.get("gpu_speedup_exponent", 1.0)),
                cpu_speedup_exponent=float(merged.get("cpu_speedup_exponent", 0.6)),
                startup_seconds_gpu=float(merged.get("startup_seconds_gpu", 20.0)),
                startup_seconds_cpu=float(merged.get("startup_seconds_cpu", 15.0)),
                termination_seconds=float(merged.get("termination_seconds", 10.0)),
                prompt_bytes=int(merged.get("prompt_bytes", 1024)),
                result_bytes=int(merged.get("result_bytes", 2048)),
                storage_gb=float(merged.get("storage_gb", 0.0)),
            )
        )

    links_raw = raw.get("links", {})
    default_link = None
    links = []
    if isinstance(links_raw, Mapping):
        if "default" in links_raw and links_raw["default"]:
            d = links_raw["default"]
            default_link = TopologyLink(
                src="*", dst="*",
                bandwidth_bytes_per_s=float(d["bandwidth_bytes_per_s"]),
                rtt_seconds=float(d.get("rtt_seconds", 0.0)),
            )
        overrides = links_raw.get("overrides", []) or []
    else:
        overrides = links_raw or []
    for entry in overrides:
        links.append(
            TopologyLink(
                src=str(entry["src"]),
                dst=str(entry["dst"]),
                bandwidth_bytes_per_s=float(entry["bandwidth_bytes_per_s"]),
                rtt_seconds=float(entry.get("rtt_seconds", 0.0)),
            )
        )

    wl_raw = raw.get("workload", {}) or {}
    workload = WorkloadSpec(
        presence_prob=_per_lm_map(wl_raw.get("presence_prob", 0.18), namemap),
        k_max=int(wl_raw.get("k_max", 8)),
        k_weights=wl_raw.get("k_weights"),
        drift=[
            {"epoch": int(d["epoch"]),
             "scale": _per_lm_map(d.get("scale", {}), namemap) or {}}
            for d in (wl_raw.get("drift") or [])
        ],
        trace_path=wl_raw.get("trace_path"),
    )

    config = SimConfig(
        servers=servers,
        lms=lms,
        links=links,
        default_link=default_link,
        slot_seconds=float(raw.get("slot_seconds", 30.0)),
        slots_per_epoch=int(raw.get("slots_per_epoch", 50)),
        tau_seconds=float(raw.get("tau_seconds", 900.0)),
        lambda_weight=float(raw.get("lambda_weight", 0.5)),
        workload=workload,
        policy=str(raw.get("policy", "MA")),
        seed=int(raw.get("seed", 0)),
        reroute_backlog_factor=float(raw.get("reroute_backlog_factor", 1.5)),
        planner_shift_cap=float(raw.get("planner_shift_cap", 0.15)),
        retrieval_k=int(raw.get("retrieval_k", 4)),
    )
    config.dpp = _parse_dpp(raw.get("dpp"), namemap) or default_dpp_params(config)

    if raw.get("initial_policy"):
        config.initial_policy = _parse_policy(raw["initial_policy"], namemap)

    return validate_config(config) if validate else config


def _parse_policy(raw: Mapping, namemap: Mapping[str, int]) -> MacroPolicy:
    routing = {
        namemap[str(lm)]: {str(n): float(p) for n, p in row.items()}
        for lm, row in (raw.get("routing_probabilities") or {}).items()
    }
    roles = {
        str(node): frozenset(namemap[str(lm)] for lm in lst)
        for node, lst in (raw.get("node_role_intent") or {}).items()
    }
    return MacroPolicy(routing_probs=routing, node_roles=roles)


def _parse_dpp(raw: Optional[Mapping], namemap: Mapping[str, int]) -> Optional[DppParams]:
    if not raw:
        return None
    alpha_cpu = _per_lm_map(raw.get("alpha_cpu"), namemap) or {}
    alpha_gpu = _per_lm_map(raw.get("alpha_gpu"), namemap) or {}
    if isinstance(alpha_cpu, float):
        alpha_cpu = {lm_id: alpha_cpu for lm_id in set(namemap.values())}
    if isinstance(alpha_gpu, float):
        alpha_gpu = {lm_id: alpha_gpu for lm_id in set(namemap.values())}
    return DppParams(
        v=float(raw.get("v", 1.0)),
        alpha_cpu=alpha_cpu,
        alpha_gpu=alpha_gpu,
        p0=float(raw.get("p0", 0.1)),
        p1=float(raw.get("p1", 0.25)),
        p2=float(raw.get("p2", 0.37)),
        lambda_churn=float(raw.get("lambda_churn", 0.08)),
        kappa=float(raw.get("kappa", 0.76)),
        epsilon=float(raw.get("epsilon", 0.5)),
    )


def save_dpp_params(params: DppParams, path) -> None:
    with open(path, "w") as fh:
        json.dump({"dpp": params.to_dict()}, fh, indent=1, sort_keys=True)


def load_dpp_params(path, config: SimConfig) -> DppParams:
    """Read a calibration output back; round-trips through the same schema."""
    text = Path(path).read_text()
    raw = json.loads(text) if text.lstrip().startswith("{") else yaml.safe_load(text)
    namemap = {}
    for lm in config.lms:
        namemap[lm.name] = lm.id
        namemap[str(lm.id)] = lm.id
    params = _parse_dpp(raw.get("dpp", raw), namemap)
    if params is None:
        raise ValueError(f"{path}: no dpp section")
    return params
