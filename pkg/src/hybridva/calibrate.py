"""Fair guarantee fee search.

The premium gap ``P0 - V0(fee)`` is evaluated on an equally spaced fee sweep,
the first bracketing interval is re-swept more finely, and the root of a
natural cubic spline through the refined points is taken as the fair fee.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import bisect

from .contract import ContractSpec, MarketParams
from .dp import Mode, value_contract
from .pde import GridSpec

log = logging.getLogger(__name__)

BPS = 1e-4
GAP_RTOL = 1e-4


class FeeStatus(str, enum.Enum):
    OK = "ok"
    NOT_VIABLE = "not_viable"
    CAP_TOO_LOW = "cap_too_low"


@dataclass(frozen=True)
class FeeSweep:
    lo_bps: float = 0.0
    hi_bps: float = 400.0
    count: int = 21
    refine_count: int = 21

    def __post_init__(self):
        if self.lo_bps < 0 or self.hi_bps <= self.lo_bps:
            raise ValueError(f"invalid sweep bounds [{self.lo_bps}, {self.hi_bps}]")
        if self.count < 4 or self.refine_count < 4:
            raise ValueError("sweep and refinement need at least 4 points")


@dataclass
class FeeResult:
    status: FeeStatus
    fee_bps: float | None = None
    value_at_root: float | None = None
    gap_at_root: float | None = None
    sweep_bps: np.ndarray = field(default_factory=lambda: np.empty(0))
    sweep_gap: np.ndarray = field(default_factory=lambda: np.empty(0))
    refined_bps: np.ndarray = field(default_factory=lambda: np.empty(0))
    refined_gap: np.ndarray = field(default_factory=lambda: np.empty(0))
    sign_changes: int = 0
    premium: float = 100.0

    @property
    def viable(self) -> bool:
        return self.status is FeeStatus.OK

    @property
    def within_tolerance(self) -> bool:
        return self.gap_at_root is not None and abs(self.gap_at_root) <= GAP_RTOL * self.premium


def premium_gap(fee_bps: float, spec: ContractSpec, market: MarketParams, grid: GridSpec,
                mode: Mode) -> float:
    res = value_contract(spec.with_fee(fee_bps * BPS), market, grid, mode, keep_surfaces=False)
    return spec.premium - res.value_at_inception


def count_sign_changes(gaps: np.ndarray) -> int:
    s = np.sign(gaps)
    s = s[s != 0]
    return int(np.count_nonzero(s[1:] != s[:-1]))


def _spline_root(fees: np.ndarray, gaps: np.ndarray) -> float:
    spline = CubicSpline(fees, gaps, bc_type="natural")
    for a, b, ga, gb in zip(fees[:-1], fees[1:], gaps[:-1], gaps[1:]):
        if ga == 0.0:
            return float(a)
        if ga < 0.0 <= gb:
            if gb == 0.0:
                return float(b)
            return float(bisect(spline, a, b, xtol=1e-12, maxiter=200))
    raise RuntimeError("no bracketing interval in refined sweep")


def fair_fee(spec: ContractSpec, market: MarketParams, grid: GridSpec,
             mode: Mode = Mode.DYNAMIC, sweep: FeeSweep = FeeSweep()) -> FeeResult:
    """Fair fee in basis points, or a NOT_VIABLE / CAP_TOO_LOW status.

    The fee already stored in ``spec`` is ignored.
    """
    mode = Mode(mode)
    fees = np.linspace(sweep.lo_bps, sweep.hi_bps, sweep.count)
    first = premium_gap(fees[0], spec, market, grid, mode)
    if first > 0:
        return FeeResult(FeeStatus.NOT_VIABLE, sweep_bps=fees[:1], sweep_gap=np.array([first]),
                         premium=spec.premium)

    gaps = np.empty_like(fees)
    gaps[0] = first
    for i in range(1, fees.size):
        gaps[i] = premium_gap(fees[i], spec, market, grid, mode)
    changes = count_sign_changes(gaps)
    if changes > 1:
        log.warning("premium gap changes sign %d times on the sweep", changes)
    if gaps[-1] < 0:
        return FeeResult(FeeStatus.CAP_TOO_LOW, sweep_bps=fees, sweep_gap=gaps, sign_changes=changes,
                         premium=spec.premium)

    i = int(np.argmax(gaps >= 0))
    lo, hi = fees[max(i - 1, 0)], fees[i]
    if lo == hi:
        fine = np.array([lo])
        fine_gap = gaps[i:i + 1]
        root = float(lo)
    else:
        fine = np.linspace(lo, hi, sweep.refine_count)
        fine_gap = np.empty_like(fine)
        fine_gap[0], fine_gap[-1] = gaps[i - 1], gaps[i]
        for j in range(1, fine.size - 1):
            fine_gap[j] = premium_gap(fine[j], spec, market, grid, mode)
        root = _spline_root(fine, fine_gap)

    value = value_contract(spec.with_fee(root * BPS), market, grid, mode,
                           keep_surfaces=False).value_at_inception
    res = FeeResult(FeeStatus.OK, fee_bps=root, value_at_root=value, gap_at_root=spec.premium - value,
                    sweep_bps=fees, sweep_gap=gaps, refined_bps=fine, refined_gap=fine_gap,
                    sign_changes=changes, premium=spec.premium)
    if not res.within_tolerance:
        log.warning("fair fee %.4f bps leaves a premium gap of %.3g", root, res.gap_at_root)
    return res
