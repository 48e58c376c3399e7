"""Scalar performance functionals: service rates, Jain fairness and its
normalization, latency normalization, the composite objective, the delayed
slot reward, and epoch telemetry assembly.

Everything operates on immutable ledger rows (objects exposing ``lm_type``,
``delta`` and ``t_q``), so the same code recomputes reports from CSV exports.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

log = logging.getLogger(__name__)


def service_rates(rows: Iterable, lm_ids: Optional[Sequence[int]] = None) -> dict[int, Optional[float]]:
    """Per-type success fraction S_i / A_i over finalized rows.

    Types with zero rows map to None ("absent") and are excluded downstream.
    """
    arrived: dict[int, int] = {}
    succeeded: dict[int, int] = {}
    for row in rows:
        lm = row.lm_type
        arrived[lm] = arrived.get(lm, 0) + 1
        succeeded[lm] = succeeded.get(lm, 0) + row.delta
    ids = list(lm_ids) if lm_ids is not None else sorted(arrived)
    return {
        lm: (succeeded.get(lm, 0) / arrived[lm]) if arrived.get(lm) else None
        for lm in ids
    }


def jain(rho: Sequence[float]) -> float:
    """Jain's fairness index (sum rho)^2 / (I * sum rho^2), in [1/I, 1].

    An all-zero vector degenerates to the worst case 1/I by convention.
    """
    if len(rho) == 0:
        raise ValueError("fairness needs a nonempty rate vector")
    if any(r < 0 for r in rho):
        raise ValueError("rates must be nonnegative")
    total = sum(rho)
    if total == 0:
        log.warning("all-zero rate vector; Jain index pinned to 1/I")
        return 1.0 / len(rho)
    return total * total / (len(rho) * sum(r * r for r in rho))


def normalize_fairness(f: float, i: int) -> float:
    """Rescale a Jain value from [1/I, 1] onto [0, 1]."""
    lo = 1.0 / i
    if not (lo - 1e-9 <= f <= 1.0 + 1e-9):
        raise ValueError(f"Jain value {f} outside [{lo}, 1]")
    if i == 1:
        return 1.0
    return min(1.0, max(0.0, (f - lo) / (1.0 - lo)))


def normalized_latency(rows: Iterable, tau: float) -> float:
    """Mean T_q/tau over successful rows; 1.0 (worst) when nothing succeeded."""
    total = 0.0
    n = 0
    for row in rows:
        if row.delta:
            total += row.t_q / tau
            n += 1
    if n == 0:
        log.warning("no successful requests; normalized latency pinned to 1.0")
        return 1.0
    return total / n


def composite_objective(t_norm: float, f_norm: float, lam: float) -> float:
    """lam * T_norm + (1 - lam) * (1 - F_norm); lower is better."""
    return lam * t_norm + (1.0 - lam) * (1.0 - f_norm)


def fairness_over(rows: Sequence, lm_ids: Optional[Sequence[int]] = None) -> Optional[float]:
    """Normalized Jain fairness over the per-type success rates of ``rows``.

    Types absent from the window shrink I rather than being imputed.  None
    when no type has any data.
    """
    rates = [r for r in service_rates(rows, lm_ids).values() if r is not None]
    if not rates:
        return None
    return normalize_fairness(jain(rates), len(rates))


def slot_reward(slot_rows: Sequence, lam: float, tau: float = 900.0) -> Optional[float]:
    """Delayed slot reward 1 - objective over the slot's arrival cohort.

    Returns None ("not ready") while any cohort member is still pending;
    the reward only exists once every outcome is final.
    """
    if any(row.outcome == "pending" for row in slot_rows):
        return None
    if not slot_rows:
        return None
    f_norm = fairness_over(slot_rows)
    if f_norm is None:
        return None
    t_norm = normalized_latency(slot_rows, tau)
    return 1.0 - composite_objective(t_norm, f_norm, lam)


@dataclass
class EpochTelemetry:
    """Aggregates over the requests that resolved inside one epoch window."""

    epoch: int
    resolved: dict[int, int] = field(default_factory=dict)
    successes: dict[int, int] = field(default_factory=dict)
    success_mean_latency_s: dict[int, Optional[float]] = field(default_factory=dict)
    success_ratio: dict[int, Optional[float]] = field(default_factory=dict)
    f_norm: Optional[float] = None
    t_norm: Optional[float] = None
    objective: Optional[float] = None
    off_role_ratio: Optional[float] = None
    node_backlog_mean: dict[str, dict[int, float]] = field(default_factory=dict)
    arrival_share: dict[int, float] = field(default_factory=dict)
    no_data: bool = False

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "resolved": {str(k): v for k, v in self.resolved.items()},
            "successes": {str(k): v for k, v in self.successes.items()},
            "success_mean_latency_s": {
                str(k): v for k, v in self.success_mean_latency_s.items()
            },
            "success_ratio": {str(k): v for k, v in self.success_ratio.items()},
            "f_norm": self.f_norm,
            "t_norm": self.t_norm,
            "objective": self.objective,
            "off_role_ratio": self.off_role_ratio,
            "node_backlog_mean": {
                n: {str(k): v for k, v in per.items()}
                for n, per in self.node_backlog_mean.items()
            },
            "arrival_share": {str(k): v for k, v in self.arrival_share.items()},
            "no_data": self.no_data,
        }


def build_epoch_telemetry(
    rows: Sequence,
    routing_entries: Sequence,
    policy,
    *,
    epoch: int,
    lm_ids: Sequence[int],
    tau: float,
    lam: float,
    arrival_counts: Optional[Mapping[int, int]] = None,
    node_backlog_mean: Optional[Mapping[str, Mapping[int, float]]] = None,
) -> EpochTelemetry:
    """Assemble the telemetry record the planner consumes.

    ``rows`` is the epoch's resolved cohort; ``routing_entries`` are
    (lm_id, dest, on_role) observations used for the off-role ratio; pass
    ``policy`` None for strategies without role intents.
    """
    tel = EpochTelemetry(epoch=epoch)
    for lm in lm_ids:
        lm_rows = [r for r in rows if r.lm_type == lm]
        succ = [r for r in lm_rows if r.delta]
        tel.resolved[lm] = len(lm_rows)
        tel.successes[lm] = len(succ)
        tel.success_ratio[lm] = len(succ) / len(lm_rows) if lm_rows else None
        tel.success_mean_latency_s[lm] = (
            sum(r.t_q for r in succ) / len(succ) if succ else None
        )

    if not rows:
        tel.no_data = True
    else:
        tel.f_norm = fairness_over(rows, lm_ids)
        tel.t_norm = normalized_latency(rows, tau)
        tel.objective = composite_objective(tel.t_norm, tel.f_norm, lam)

    if policy is not None and routing_entries:
        off = sum(1 for e in routing_entries if not e[2])
        tel.off_role_ratio = off / len(routing_entries)
    elif policy is not None:
        tel.off_role_ratio = 0.0

    counts = dict(arrival_counts or {lm: tel.resolved.get(lm, 0) for lm in lm_ids})
    total = sum(counts.values())
    tel.arrival_share = {
        lm: (counts.get(lm, 0) / total if total else 0.0) for lm in lm_ids
    }
    if node_backlog_mean:
        tel.node_backlog_mean = {n: dict(per) for n, per in node_backlog_mean.items()}
    return tel
