"""Latency-sparsity lookup, budget solving, and the sparsity loss.

The latency table maps a per-block pruning rate to one block's measured
latency on a device; values between measured points are linearly
interpolated and never extrapolated. A pruning plan stores one cumulative
pruning rate per block (constant within a phase, zero before the first
selector, nondecreasing across phases because the keep mask only shrinks);
its latency is the sum of per-block lookups, which a budget must cover.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .errors import (InfeasibleBudgetError, RateRangeError, ShapeError,
                     TableValidationError)
from .numcore import Tensor
from .selector import KeepDecision

_FEAS_TOL = 1e-9  # absolute slack so a budget equal to a lookup sum is feasible

# single-block latencies (ms) measured on the Xilinx ZCU102 at rate steps of 0.1
BUILTIN_TABLES: dict[str, tuple[tuple[float, ...], tuple[float, ...]]] = {
    "deit-t": ((0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
               (0.689, 0.630, 0.587, 0.509, 0.468, 0.424)),
    "deit-s": ((0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
               (2.107, 1.891, 1.710, 1.503, 1.315, 1.121)),
}


@dataclass
class LatencyTable:
    """Monotone map from pruning rate to per-block latency in milliseconds."""

    device: str
    rates: list[float]
    latencies_ms: list[float]

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.rates) != len(self.latencies_ms):
            raise TableValidationError("rate and latency columns differ in length")
        if len(self.rates) < 2:
            raise TableValidationError("table needs at least 2 rows")
        for i, r in enumerate(self.rates):
            if not 0.0 <= r < 1.0:
                raise TableValidationError(f"rate {r} outside [0, 1)", row=i)
        for i in range(1, len(self.rates)):
            if self.rates[i] <= self.rates[i - 1]:
                raise TableValidationError("rates must strictly increase", row=i)
            if self.latencies_ms[i] >= self.latencies_ms[i - 1]:
                raise TableValidationError(
                    "latencies must strictly decrease", row=i)

    @property
    def min_rate(self) -> float:
        return self.rates[0]

    @property
    def max_rate(self) -> float:
        return self.rates[-1]


def builtin_table(device: str) -> LatencyTable:
    if device not in BUILTIN_TABLES:
        raise TableValidationError(
            f"no builtin table for {device!r}; known: {sorted(BUILTIN_TABLES)}")
    rates, lats = BUILTIN_TABLES[device]
    return LatencyTable(device, list(rates), list(lats))


def load_table(path: str | Path, device: str | None = None) -> LatencyTable:
    """Parse a ``rate,latency_ms`` CSV file and validate monotonicity."""
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if not lines or lines[0].replace(" ", "") != "rate,latency_ms":
        raise TableValidationError(
            f"{path}: expected header 'rate,latency_ms'", row=0)
    rates, lats = [], []
    for i, ln in enumerate(lines[1:], start=1):
        parts = ln.split(",")
        if len(parts) != 2:
            raise TableValidationError(f"{path}: expected 2 columns", row=i)
        try:
            rates.append(float(parts[0]))
            lats.append(float(parts[1]))
        except ValueError as exc:
            raise TableValidationError(f"{path}: {exc}", row=i) from exc
    return LatencyTable(device or path.stem, rates, lats)


def save_table(table: LatencyTable, path: str | Path) -> None:
    lines = ["rate,latency_ms"]
    lines += [f"{r},{l}" for r, l in zip(table.rates, table.latencies_ms)]
    Path(path).write_text("\n".join(lines) + "\n")


def block_lat(table: LatencyTable, rate: float) -> float:
    """Latency of one block at ``rate``: exact at table points, linear between."""
    if rate < table.min_rate or rate > table.max_rate:
        raise RateRangeError(
            f"rate {rate} outside measured range "
            f"[{table.min_rate}, {table.max_rate}]")
    return float(np.interp(rate, table.rates, table.latencies_ms))


# --------------------------------------------------------------------------
# pruning plans

def _expand_rates(num_blocks: int, positions: Sequence[int],
                  phase_rates: Sequence[float]) -> list[float]:
    rates = []
    for block in range(1, num_blocks + 1):
        governing = [r for p, r in zip(positions, phase_rates) if p < block]
        rates.append(governing[-1] if governing else 0.0)
    return rates


@dataclass
class PruningPlan:
    """Per-block cumulative pruning rates plus the selector positions.

    A selector sits after block ``p`` (``p = 0`` means before the first
    block) and its phase rate governs blocks ``p+1`` through the next
    selector position.
    """

    num_blocks: int
    positions: list[int] = field(default_factory=list)
    block_rates: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.block_rates:
            self.block_rates = [0.0] * self.num_blocks
        self.validate()

    @classmethod
    def from_phase_rates(cls, num_blocks: int, positions: Sequence[int],
                         phase_rates: Sequence[float]) -> "PruningPlan":
        if len(positions) != len(phase_rates):
            raise ShapeError("positions and phase_rates must align")
        return cls(num_blocks, list(positions),
                   _expand_rates(num_blocks, positions, phase_rates))

    def validate(self) -> None:
        if self.num_blocks < 0:
            raise ShapeError("num_blocks must be nonnegative")
        if len(self.block_rates) != self.num_blocks:
            raise ShapeError(
                f"expected {self.num_blocks} block rates, got "
                f"{len(self.block_rates)}")
        pos = self.positions
        if any(not 0 <= p <= self.num_blocks - 1 for p in pos):
            raise ShapeError(f"positions must lie in [0, {self.num_blocks - 1}]")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ShapeError("positions must be strictly increasing")
        if any(r < 0 or r >= 1 for r in self.block_rates):
            raise ShapeError("block rates must lie in [0, 1)")
        expect = _expand_rates(self.num_blocks, pos, self.phase_rates())
        if self.block_rates != expect:
            raise ShapeError(
                "block rates must be constant within phases and zero before "
                "the first selector")
        phases = self.phase_rates()
        if any(b < a for a, b in zip(phases, phases[1:])):
            raise ShapeError("cumulative phase rates must be nondecreasing")

    def phase_rates(self) -> list[float]:
        return [self.block_rates[p] for p in self.positions]


def plan_latency(table: LatencyTable, plan: "PruningPlan | Sequence[float]") -> float:
    """Total model latency: sum of per-block lookups."""
    rates = plan.block_rates if isinstance(plan, PruningPlan) else list(plan)
    return float(sum(block_lat(table, r) for r in rates))


def rate_grid(table: LatencyTable, step: float = 0.05) -> list[float]:
    """Rates from the table minimum up to its maximum in ``step`` increments."""
    if step <= 0:
        raise ShapeError("grid step must be positive")
    k0 = int(np.ceil(table.min_rate / step - 1e-12))
    grid = []
    k = k0
    while k * step <= table.max_rate + 1e-12:
        grid.append(round(k * step, 10))
        k += 1
    return grid


def solve_budget(table: LatencyTable, num_blocks: int,
                 positions: Sequence[int], budget_ms: float,
                 grid_step: float = 0.05) -> PruningPlan:
    """Least pruning that satisfies the latency budget.

    Exhaustively searches nondecreasing per-phase rate tuples on the grid,
    minimizing the summed per-block rate; ties resolve toward plans whose
    earlier phases prune less (earlier blocks tolerate pruning worst).
    Raises with the minimum achievable latency when no plan fits.
    """
    positions = sorted(positions)
    grid = rate_grid(table, grid_step)
    best: tuple[float, tuple[float, ...]] | None = None
    best_plan: PruningPlan | None = None
    for phases in itertools.combinations_with_replacement(grid, len(positions)):
        plan = PruningPlan.from_phase_rates(num_blocks, positions, list(phases))
        if plan_latency(table, plan) <= budget_ms + _FEAS_TOL:
            key = (sum(plan.block_rates), phases)
            if best is None or key < best:
                best, best_plan = key, plan
    if best_plan is None:
        floor = PruningPlan.from_phase_rates(
            num_blocks, positions, [table.max_rate] * len(positions))
        raise InfeasibleBudgetError(budget_ms, plan_latency(table, floor))
    return best_plan


# --------------------------------------------------------------------------
# sparsity loss

def sparsity_loss(block_decisions: Sequence[KeepDecision],
                  block_rates: Sequence[float],
                  include_protected: bool = False) -> Tensor:
    """Squared gap between each block's batch-mean kept fraction and target.

    The kept-token count is normalized by the prunable token count so the
    fraction is commensurate with ``1 - rate``; the loss is zero exactly
    when every block's batch mean sits on its target. Protected tokens
    (class and package slots) are excluded from numerator and denominator
    unless ``include_protected`` is set.
    """
    if len(block_decisions) != len(block_rates):
        raise ShapeError(
            f"{len(block_decisions)} decisions vs {len(block_rates)} rates")
    total = Tensor(0.0)
    for dec, rate in zip(block_decisions, block_rates):
        frac = dec.kept_fraction(include_protected)
        gap = nc.sub(1.0 - rate, frac)
        total = nc.add(total, nc.mul(gap, gap))
    return total
