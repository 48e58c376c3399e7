"""Seeded request generation and trace replay.

Arrivals are drawn independently per (node, LM, slot): with the configured
presence probability the pair rolls a prompt count k; k = 0 means no request
materialises.  Every draw derives from (seed, slot), so a slot's arrivals are
reproducible regardless of how many slots ran before it.
"""

from __future__ import annotations

import csv
import itertools
from typing import Iterator, Optional, Sequence

import numpy as np

from .model import Request, SimConfig, WorkloadSpec

_WORKLOAD_STREAM = 11


class TraceError(ValueError):
    pass


def sample_k(spec: WorkloadSpec, rng: np.random.Generator) -> int:
    """Draw a raw prompt count from 0..k_max (0 meaning no request)."""
    if spec.k_weights:
        w = np.asarray(spec.k_weights, dtype=float)
        return int(rng.choice(len(w), p=w / w.sum()))
    return int(rng.integers(0, spec.k_max + 1))


class WorkloadGenerator:
    """Owns the arrival RNG for one simulation instance."""

    def __init__(self, config: SimConfig, seed: Optional[int] = None):
        self.config = config
        self.spec = config.workload
        self.seed = config.seed if seed is None else seed
        self.nodes = config.worker_ids
        self._ids = itertools.count()

    def _rng(self, slot: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.seed, _WORKLOAD_STREAM, slot])
        )

    def generate_slot_arrivals(self, slot: int) -> list[Request]:
        rng = self._rng(slot)
        epoch = slot // self.config.slots_per_epoch
        out = []
        for node in self.nodes:
            for lm_id in self.config.lm_ids:
                p = self.spec.presence_for(lm_id, epoch)
                if rng.random() >= p:
                    continue
                k = sample_k(self.spec, rng)
                if k == 0:
                    continue
                out.append(
                    Request(
                        request_id=next(self._ids),
                        lm_type=lm_id,
                        origin_node=node,
                        arrival_slot=slot,
                        k_prompts=k,
                    )
                )
        return out


def write_trace(path, arrivals_by_slot: Sequence[Sequence[Request]]) -> None:
    """Persist arrivals as the canonical CSV trace (header + one row/request)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "origin_node", "lm_id", "k_prompts"])
        for slot_arrivals in arrivals_by_slot:
            for req in slot_arrivals:
                writer.writerow(
                    [req.arrival_slot, req.origin_node, req.lm_type, req.k_prompts]
                )


def replay_trace(
    path,
    lm_ids: Optional[set[int]] = None,
    node_ids: Optional[set[str]] = None,
) -> Iterator[list[tuple[int, str, int, int]]]:
    """Yield per-slot lists of (slot, origin, lm_id, k) tuples, slot 0 upward.

    Slots between recorded rows yield empty lists; a malformed or
    unresolvable row raises TraceError naming its line number.
    """
    rows: list[tuple[int, str, int, int]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return
        if [h.strip() for h in header] != ["slot", "origin_node", "lm_id", "k_prompts"]:
            raise TraceError(f"line 1: unexpected header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                slot, origin, lm_id, k = int(row[0]), row[1], int(row[2]), int(row[3])
            except (ValueError, IndexError) as exc:
                raise TraceError(f"line {lineno}: malformed row {row!r}") from exc
            if lm_ids is not None and lm_id not in lm_ids:
                raise TraceError(f"line {lineno}: unknown LM id {lm_id}")
            if node_ids is not None and origin not in node_ids:
                raise TraceError(f"line {lineno}: unknown node {origin!r}")
            if not (1 <= k):
                raise TraceError(f"line {lineno}: k_prompts must be >= 1")
            if slot < 0:
                raise TraceError(f"line {lineno}: negative slot")
            rows.append((slot, origin, lm_id, k))

    if not rows:
        return
    max_slot = max(r[0] for r in rows)
    by_slot: dict[int, list] = {}
    for r in rows:
        by_slot.setdefault(r[0], []).append(r)
    for slot in range(max_slot + 1):
        yield by_slot.get(slot, [])


class TraceWorkload:
    """Drop-in arrival source backed by a recorded trace file."""

    def __init__(self, config: SimConfig, path):
        self.config = config
        self._ids = itertools.count()
        self._slots = list(
            replay_trace(
                path,
                lm_ids=set(config.lm_ids),
                node_ids=set(s.id for s in config.servers),
            )
        )

    def generate_slot_arrivals(self, slot: int) -> list[Request]:
        if slot >= len(self._slots):
            return []
        return [
            Request(
                request_id=next(self._ids),
                lm_type=lm_id,
                origin_node=origin,
                arrival_slot=slot,
                k_prompts=k,
            )
            for (_, origin, lm_id, k) in self._slots[slot]
        ]


def expected_prompts_per_slot(config: SimConfig, lm_id: int, epoch: int = 0) -> float:
    """Analytic mean prompts/slot a type offers cluster-wide (zeros included)."""
    spec = config.workload
    return len(config.worker_ids) * spec.presence_for(lm_id, epoch) * spec.mean_k()
