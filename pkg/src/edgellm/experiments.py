"""Experiment orchestration: strategy assembly, full runs, artifact files,
comparison tables and the calibration/report commands' logic.

Strategy names follow the comparison set: MA (full agentic stack), RR
(random routing + random deployment), RL (random + DPP), MAL (agentic
routing + DPP), AL (round-robin + DPP), RF (random + static full
activation), LL (local + DPP).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace
from typing import Optional

import numpy as np

from . import agents as ag
from . import baselines as bl
from .engine import SlotOutcome, World, drain as drain_world, run_epoch
from .metrics import (
    EpochTelemetry,
    composite_objective,
    fairness_over,
    normalized_latency,
    service_rates,
)
from .model import MacroPolicy, Request, SimConfig, validate_config
from .stats import mean_ci95
from .workload import TraceWorkload, WorkloadGenerator

log = logging.getLogger(__name__)

POLICY_NAMES = ("MA", "RR", "RL", "MAL", "AL", "RF", "LL")

LEDGER_COLUMNS = [
    "request_id", "lm", "origin", "dest", "k",
    "uplink_s", "queue_s", "infer_s", "downlink_s", "T_q", "delta",
]


@dataclass
class RunManifest:
    scenario: str
    policy: str
    seeds: list[int]
    epochs: int
    out_dir: str
    backend: str = "scripted"  # scripted | external

    def validate(self) -> "RunManifest":
        if self.policy not in POLICY_NAMES:
            raise ValueError(f"unknown policy {self.policy!r}; pick one of {POLICY_NAMES}")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.backend not in ("scripted", "external"):
            raise ValueError(f"unknown backend {self.backend!r}")
        return self


@dataclass
class RunResult:
    policy: str
    seed: int
    config: SimConfig
    ledger: list[Request]
    telemetries: list[EpochTelemetry]
    slot_outcomes: list[SlotOutcome]
    event_log: list[str]
    planner_fallbacks: int = 0
    deploy_flips: int = 0

    def summary(self) -> dict:
        lm_ids = self.config.lm_ids
        rows = [r for r in self.ledger if r.outcome != "pending"]
        rates = service_rates(rows, lm_ids)
        succ = [r for r in rows if r.delta]
        mean_latency = sum(r.t_q for r in succ) / len(succ) if succ else None
        f_norm = fairness_over(rows, lm_ids)
        t_norm = normalized_latency(rows, self.config.tau_seconds)
        objective = (
            composite_objective(t_norm, f_norm, self.config.lambda_weight)
            if f_norm is not None
            else None
        )
        per_lm_latency = {}
        for lm in lm_ids:
            lm_succ = [r.t_q for r in succ if r.lm_type == lm]
            per_lm_latency[lm] = sum(lm_succ) / len(lm_succ) if lm_succ else None
        return {
            "policy": self.policy,
            "seed": self.seed,
            "requests": len(rows),
            "successes": len(succ),
            "mean_latency_s": mean_latency,
            "t_norm": t_norm,
            "f_norm": f_norm,
            "objective": objective,
            "success_ratio": {str(k): v for k, v in rates.items()},
            "per_lm_mean_latency_s": {str(k): v for k, v in per_lm_latency.items()},
        }

    def objective_series(self) -> list[Optional[float]]:
        return [t.objective for t in self.telemetries]


class Simulation:
    """One seeded policy run over a validated scenario."""

    def __init__(
        self,
        config: SimConfig,
        policy_name: Optional[str] = None,
        seed: Optional[int] = None,
        backend: str = "scripted",
        dpp_params: Optional[bl.DppParams] = None,
        planner_backend: Optional[ag.PlannerBackend] = None,
        deploy_backend: Optional[ag.PlannerBackend] = None,
    ):
        validate_config(config)
        self.config = config
        self.policy_name = policy_name or config.policy
        if self.policy_name not in POLICY_NAMES:
            raise ValueError(f"unknown policy {self.policy_name!r}")
        self.seed = config.seed if seed is None else seed
        self.world = World(config)
        if config.workload.trace_path:
            self.workload = TraceWorkload(config, config.workload.trace_path)
        else:
            self.workload = WorkloadGenerator(config, self.seed)
        self.dpp_params = dpp_params or config.dpp or bl.default_dpp_params(config)

        if backend == "external":
            planner_backend = planner_backend or ag.ExternalBackend()
            deploy_backend = deploy_backend or planner_backend

        worker_ids = config.worker_ids
        self._dpp: Optional[bl.DppDeployer] = None
        self._planner: Optional[ag.MacroPlanner] = None
        self._agentic_scheduler: Optional[ag.AgenticScheduler] = None
        self._deploy_agent: Optional[ag.DeployControlAgent] = None

        name = self.policy_name
        if name in ("MA", "MAL"):
            self._planner = ag.MacroPlanner(config, backend=planner_backend)
            self._agentic_scheduler = ag.AgenticScheduler(config, self.seed)
            self.scheduler = self._agentic_scheduler
        elif name in ("RR", "RL", "RF"):
            self.scheduler = bl.RandomRouter(config, self.seed)
        elif name == "AL":
            self.scheduler = bl.AverageRouter(config)
        elif name == "LL":
            self.scheduler = bl.LocalRouter()

        if name in ("RL", "MAL", "AL", "LL"):
            self._dpp = bl.DppDeployer(config, self.dpp_params)
            self.deployers = {n: self._dpp.for_node(n) for n in worker_ids}
        elif name == "RR":
            rd = bl.RandomDeployer(config, self.seed)
            self.deployers = {n: rd.for_node(n) for n in worker_ids}
        elif name == "RF":
            fa = bl.FullActivationDeployer(config)
            self.deployers = {n: fa.for_node(n) for n in worker_ids}
        elif name == "MA":
            self._deploy_agent = ag.DeployControlAgent(config, backend=deploy_backend)
            self.deployers = {n: self._deploy_agent.for_node(n) for n in worker_ids}

        self.memory = ag.EpisodicMemory()
        self._policy: Optional[MacroPolicy] = None
        self._last_telemetry: Optional[EpochTelemetry] = None

    def _planner_hook(self, epoch: int) -> Optional[MacroPolicy]:
        if self._planner is None:
            return None
        if epoch == 0:
            if self.config.initial_policy is not None:
                policy, _ = ag.validate_macro_policy(
                    self.config.initial_policy, self.config
                )
            else:
                policy = ag.baseline_policy(self.config)
        else:
            policy = self._planner.plan(self._policy, self._last_telemetry)
        self._policy = policy
        if self._agentic_scheduler is not None:
            self._agentic_scheduler.policy = policy
        if self._deploy_agent is not None:
            self._deploy_agent.set_policy(policy)
        return policy

    def run(self, epochs: int, drain: bool = True) -> RunResult:
        telemetries = []
        outcomes: list[SlotOutcome] = []
        uses_planner = self._planner is not None
        for epoch in range(epochs):
            telemetry, epoch_outcomes, policy = run_epoch(
                self.world,
                epoch,
                self._planner_hook if uses_planner else None,
                self.scheduler,
                self.deployers,
                self.workload.generate_slot_arrivals,
                previous_policy=self._policy,
            )
            outcomes.extend(epoch_outcomes)
            self._last_telemetry = telemetry
            if uses_planner and policy is not None:
                ag.record_case(self.memory, epoch, telemetry, policy)
                if self._planner is not None:
                    self._planner.memory = self.memory
            telemetries.append(telemetry)

        if drain:
            tail = drain_world(
                self.world, epochs * self.config.slots_per_epoch,
                self.scheduler, self.deployers,
            )
            outcomes.extend(tail)
            if telemetries:
                self._fold_drain_into_last_epoch(telemetries, tail)

        return RunResult(
            policy=self.policy_name,
            seed=self.seed,
            config=self.config,
            ledger=list(self.world.ledger),
            telemetries=telemetries,
            slot_outcomes=outcomes,
            event_log=list(self.world.event_log),
            planner_fallbacks=self._planner.fallbacks if self._planner else 0,
            deploy_flips=self._dpp.flips if self._dpp else 0,
        )

    def _fold_drain_into_last_epoch(self, telemetries, tail_outcomes) -> None:
        """Requests resolving during the drain attribute to the final epoch."""
        from .metrics import build_epoch_telemetry

        extra = []
        for outcome in tail_outcomes:
            extra.extend(outcome.completed)
            extra.extend(outcome.failed)
        if not extra:
            return
        last = telemetries[-1]
        spe = self.config.slots_per_epoch
        window = range(last.epoch * spe, (last.epoch + 1) * spe)
        rows = [
            r for r in self.world.ledger
            if r.resolved_slot is not None
            and (r.resolved_slot in window or r.resolved_slot >= (last.epoch + 1) * spe)
        ]
        routing_entries = [
            (lm, dest, on_role)
            for (slot, lm, dest, on_role) in self.world.routing_log
            if slot in window
        ]
        arrival_counts = {lm: 0 for lm in self.config.lm_ids}
        for r in self.world.ledger:
            if r.arrival_slot in window:
                arrival_counts[r.lm_type] += 1
        telemetries[-1] = build_epoch_telemetry(
            rows,
            routing_entries,
            self._policy,
            epoch=last.epoch,
            lm_ids=self.config.lm_ids,
            tau=self.config.tau_seconds,
            lam=self.config.lambda_weight,
            arrival_counts=arrival_counts,
            node_backlog_mean=last.node_backlog_mean,
        )


def run_episode(
    config: SimConfig,
    policy_name: str,
    seed: int,
    slots: int,
    dpp_params: Optional[bl.DppParams] = None,
) -> dict:
    """Short diagnostic run used by DPP calibration.

    Returns windowed latency halves, mean GPU residual and the deployment
    flip rate; epochs are sized to cover exactly ``slots`` slots.
    """
    import copy

    cfg = copy.deepcopy(config)
    cfg.slots_per_epoch = slots
    sim = Simulation(cfg, policy_name, seed=seed, dpp_params=dpp_params)
    result = sim.run(1, drain=True)

    succ = sorted(
        (r for r in result.ledger if r.delta), key=lambda r: r.resolve_time
    )
    half = len(succ) // 2
    early = [r.t_q for r in succ[:half]]
    late = [r.t_q for r in succ[half:]]

    total_vgpus = sum(s.vgpu_units for s in cfg.servers)
    residuals = []
    for outcome in result.slot_outcomes:
        used = sum(res[0] for res in outcome.resources.values())
        residuals.append((total_vgpus - used) / total_vgpus if total_vgpus else 1.0)
    node_slots = max(1, len(result.slot_outcomes) * len(cfg.worker_ids))
    return {
        "early_mean_latency": sum(early) / len(early) if early else 0.0,
        "late_mean_latency": sum(late) / len(late) if late else 0.0,
        "gpu_residual_mean": (
            sum(residuals) / len(residuals) if residuals else 1.0
        ),
        "flips_per_node_slot": result.deploy_flips / node_slots,
        "successes": len(succ),
    }


# --------------------------------------------------------------------------
# artifacts
# --------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_ledger_csv(path: Path, ledger: list[Request]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LEDGER_COLUMNS)
        for r in ledger:
            writer.writerow([
                r.request_id, r.lm_type, r.origin_node, r.dispatched_to or "",
                r.k_prompts, _fmt(r.uplink_s), _fmt(r.queue_s), _fmt(r.infer_s),
                _fmt(r.downlink_s), _fmt(r.t_q), r.delta,
            ])


def read_ledger_csv(path: Path) -> list[SimpleNamespace]:
    """Ledger rows as lightweight objects the metrics module accepts."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            t_q = float(rec["T_q"]) if rec["T_q"] else None
            delta = int(rec["delta"])
            rows.append(
                SimpleNamespace(
                    request_id=int(rec["request_id"]),
                    lm_type=int(rec["lm"]),
                    origin_node=rec["origin"],
                    dispatched_to=rec["dest"] or None,
                    k_prompts=int(rec["k"]),
                    t_q=t_q,
                    delta=delta,
                    outcome="success" if delta else "failed",
                )
            )
    return rows


def write_run_artifacts(result: RunResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_ledger_csv(out_dir / "ledger.csv", result.ledger)
    with open(out_dir / "telemetry.json", "w") as fh:
        json.dump([t.to_dict() for t in result.telemetries], fh, indent=1,
                  sort_keys=True)
    with open(out_dir / "events.log", "w") as fh:
        fh.write("\n".join(result.event_log))
        if result.event_log:
            fh.write("\n")
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(result.summary(), fh, indent=1, sort_keys=True)


def _aggregate(summaries: list[dict], lm_ids: list[int]) -> dict:
    def collect(key):
        return [s[key] for s in summaries if s.get(key) is not None]

    agg: dict = {"seeds": [s["seed"] for s in summaries], "policy": summaries[0]["policy"]}
    for key in ("mean_latency_s", "t_norm", "f_norm", "objective"):
        values = collect(key)
        mean, ci = mean_ci95(values) if values else (None, None)
        agg[key] = {"mean": mean, "ci95": ci, "values": values}
    for lm in lm_ids:
        lm_key = str(lm)
        ratios = [
            s["success_ratio"][lm_key]
            for s in summaries
            if s["success_ratio"].get(lm_key) is not None
        ]
        lats = [
            s["per_lm_mean_latency_s"][lm_key]
            for s in summaries
            if s["per_lm_mean_latency_s"].get(lm_key) is not None
        ]
        agg.setdefault("per_lm", {})[lm_key] = {
            "success_ratio_mean": sum(ratios) / len(ratios) if ratios else None,
            "mean_latency_s": sum(lats) / len(lats) if lats else None,
        }
    return agg


def run_manifest(manifest: RunManifest, config: SimConfig) -> dict:
    """Execute every seed of a manifest and write the artifact tree."""
    manifest.validate()
    out = Path(manifest.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w") as fh:
        json.dump(
            {
                "scenario": manifest.scenario,
                "policy": manifest.policy,
                "seeds": manifest.seeds,
                "epochs": manifest.epochs,
                "backend": manifest.backend,
            },
            fh,
            indent=1,
            sort_keys=True,
        )
    summaries = []
    for seed in manifest.seeds:
        sim = Simulation(
            config, manifest.policy, seed=seed, backend=manifest.backend
        )
        result = sim.run(manifest.epochs)
        write_run_artifacts(result, out / f"seed_{seed}")
        summaries.append(result.summary())
    aggregate = _aggregate(summaries, config.lm_ids)
    with open(out / "summary.json", "w") as fh:
        json.dump(aggregate, fh, indent=1, sort_keys=True)
    return aggregate


def compare_runs(run_dirs: list[Path]) -> tuple[list[dict], list[dict]]:
    """Aggregate completed runs into a (policy x metric) table plus the
    latency/fairness scatter dataset (one point per policy)."""
    table = []
    scatter = []
    for run_dir in run_dirs:
        summary_path = Path(run_dir) / "summary.json"
        if not summary_path.exists():
            raise FileNotFoundError(f"missing run: no summary at {summary_path}")
        with open(summary_path) as fh:
            agg = json.load(fh)
        row = {
            "policy": agg["policy"],
            "mean_latency_s": agg["mean_latency_s"]["mean"],
            "t_norm": agg["t_norm"]["mean"],
            "f_norm": agg["f_norm"]["mean"],
            "objective": agg["objective"]["mean"],
        }
        table.append(row)
        scatter.append(
            {
                "policy": agg["policy"],
                "mean_latency_s": row["mean_latency_s"],
                "f_norm": row["f_norm"],
            }
        )
    return table, scatter


def report_run(run_dir: Path) -> dict:
    """Final summary plus the per-epoch objective series for one run dir."""
    run_dir = Path(run_dir)
    summary_path = run_dir / "summary.json"
    if not summary_path.exists():
        raise FileNotFoundError(f"missing run: no summary at {summary_path}")
    with open(summary_path) as fh:
        summary = json.load(fh)

    series: list[list] = []
    for seed_dir in sorted(run_dir.glob("seed_*")):
        tel_path = seed_dir / "telemetry.json"
        if not tel_path.exists():
            raise FileNotFoundError(f"corrupt run: missing {tel_path}")
        with open(tel_path) as fh:
            telemetry = json.load(fh)
        for entry in telemetry:
            series.append([entry["epoch"], seed_dir.name, entry["objective"]])

    by_epoch: dict[int, list[float]] = {}
    for epoch, _, objective in series:
        if objective is not None:
            by_epoch.setdefault(epoch, []).append(objective)
    mean_series = [
        {"epoch": e, "objective_mean": sum(v) / len(v)}
        for e, v in sorted(by_epoch.items())
    ]
    return {"summary": summary, "series": series, "mean_series": mean_series}
