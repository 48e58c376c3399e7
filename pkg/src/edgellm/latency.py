"""Latency primitives: inference time under a placement, link transfer
delays, and replica lifecycle delays.

All pure functions of their arguments; the engine owns when they apply.
"""

from __future__ import annotations

import math

from .model import LMTypeSpec, Placement, TopologyLink


class InfeasiblePlacementError(ValueError):
    pass


class UnreachablePairError(KeyError):
    pass


def per_prompt_seconds(lm: LMTypeSpec, mode: Placement) -> float:
    """Service seconds for one prompt under the given placement."""
    if mode.is_gpu:
        base, exp = lm.gpu_base_seconds_per_prompt, lm.gpu_speedup_exponent
    else:
        if not lm.cpu_feasible or math.isinf(lm.cpu_base_seconds_per_prompt):
            raise InfeasiblePlacementError(f"{lm.name} cannot run on CPU")
        base, exp = lm.cpu_base_seconds_per_prompt, lm.cpu_speedup_exponent
    return base / mode.units**exp


def inference_latency(lm: LMTypeSpec, mode: Placement, k: int) -> float:
    """Batch inference time: k * base / units**exponent.

    Strictly increasing in k, non-increasing in allocated units; additive in
    k up to float rounding, which the engine exploits for checkpointed
    resume accounting.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return 0.0
    return k * per_prompt_seconds(lm, mode)


def transmission_delay(link: TopologyLink | None, nbytes: int, same_node: bool = False) -> float:
    """One-way transfer time of ``nbytes`` over a link: rtt + bytes/bandwidth.

    Local processing (same node) costs nothing regardless of size.
    """
    if nbytes < 0:
        raise ValueError("nbytes must be >= 0")
    if same_node:
        return 0.0
    if link is None:
        raise UnreachablePairError("unreachable pair")
    return link.rtt_seconds + nbytes / link.bandwidth_bytes_per_s


def startup_delay(lm: LMTypeSpec, mode: Placement) -> float:
    """Seconds a fresh replica spends initializing before it can serve.

    Starting an already-running replica is a no-op at the engine level and
    never reaches this function.
    """
    return lm.startup_seconds_gpu if mode.is_gpu else lm.startup_seconds_cpu


def termination_delay(lm: LMTypeSpec) -> float:
    """Seconds a stopping replica keeps holding its resources."""
    return lm.termination_seconds


class LinkTable:
    """Pairwise link lookup with symmetric defaults.

    Explicit links override the default in both directions unless a reverse
    link is also given.  Self-pairs always resolve to zero delay.
    """

    def __init__(self, links, default: TopologyLink | None = None):
        self._table: dict[tuple[str, str], TopologyLink] = {}
        self.default = default
        for link in links:
            self._table[(link.src, link.dst)] = link
            self._table.setdefault(
                (link.dst, link.src),
                TopologyLink(link.dst, link.src, link.bandwidth_bytes_per_s, link.rtt_seconds),
            )

    def delay(self, src: str, dst: str, nbytes: int) -> float:
        if src == dst:
            return 0.0
        link = self._table.get((src, dst))
        if link is None:
            if self.default is None:
                raise UnreachablePairError(f"unreachable pair {src}->{dst}")
            link = self.default
        return transmission_delay(link, nbytes)
