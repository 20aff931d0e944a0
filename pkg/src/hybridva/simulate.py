"""Monte Carlo replay of extracted withdrawal policies."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import contract as cm
from .contract import ContractSpec, MarketParams
from .dp import TIE_RTOL, Mode, SolveResult, bilinear, safe_ratio, withdrawal_grid

log = logging.getLogger(__name__)

DEFAULT_PATHS = 10_000
DEFAULT_SEED = 20240501
CLASS_TOL = 1e-6
MAX_CLAMP_FRACTION = 0.005
LOOKUPS = ("reoptimize", "interpolate")

NO_WITHDRAWAL, BELOW, AT_GUARANTEE, EXCESS = range(4)
CLASS_NAMES = ("no_withdrawal", "below_guarantee", "at_guarantee", "excess")


class ClampError(RuntimeError):
    """Too many simulated states fell outside the solved grid."""


@dataclass(frozen=True)
class PathBatch:
    n_paths: int
    seed: int
    returns: np.ndarray  # (n_paths, n_periods) gross portfolio returns


@dataclass
class ScenarioStats:
    surrender_rate: float
    avg_surrender_time: float | None
    avg_duration: float
    proportions: dict[str, float]
    mc_value: float
    mc_stderr: float
    n_paths: int
    seed: int
    exhaustion_rate: float = 0.0
    clamp_count: int = 0


def simulate_paths(n: int, seed: int, market: MarketParams, spec: ContractSpec) -> PathBatch:
    """Per-period gross returns of the mixed portfolio under the pricing measure."""
    if n < 1:
        raise ValueError("n must be positive")
    vol = market.effective_volatility
    dt = spec.period
    z = np.random.default_rng(seed).standard_normal((n, spec.n_periods))
    returns = np.exp((market.risk_free - 0.5 * vol * vol) * dt + vol * math.sqrt(dt) * z)
    return PathBatch(n_paths=n, seed=seed, returns=returns)


def classify(w, g, fx):
    """Withdrawal class per path and a surrender flag."""
    tol = CLASS_TOL * (1.0 + g)
    cls = np.full(np.shape(w), BELOW)
    cls = np.where(w <= tol, NO_WITHDRAWAL, cls)
    cls = np.where((np.abs(w - g) <= tol) & (w > tol), AT_GUARANTEE, cls)
    excess = w > g + tol
    cls = np.where(excess, EXCESS, cls)
    surrender = excess & (w >= fx - CLASS_TOL * (1.0 + fx))
    return cls, surrender


def _reoptimized_withdrawal(solve: SolveResult, k: int, x, base, g, wbar):
    spec, grid = solve.spec, solve.grid
    W = withdrawal_grid(g, wbar)
    xe, ge = x[:, None], base[:, None]
    hx = cm.post_withdrawal_account(xe, ge, W, spec)
    hg = cm.post_withdrawal_base(xe, ge, W, spec)
    hx = np.where(hx <= 0.0, grid.x_min, hx)
    cont, _ = bilinear(solve.post_surfaces[k], grid, hx, hg)
    vals = cm.running_cashflow(spec.event_time(k), xe, ge, W, spec, solve.market) + cont
    best = vals.max(axis=-1)
    near = vals >= best[:, None] - TIE_RTOL * (1.0 + np.abs(best[:, None]))
    return np.where(near, W, np.inf).min(axis=-1)


def _policy_withdrawal(solve: SolveResult, k: int, x, base, g, wbar, lookup: str):
    if solve.mode is Mode.STATIC:
        return g.copy()
    if lookup == "reoptimize":
        if k not in solve.post_surfaces:
            raise ValueError("reoptimize lookup needs a solve run with keep_surfaces=True")
        return _reoptimized_withdrawal(solve, k, x, base, g, wbar)
    if lookup == "interpolate":
        return bilinear(solve.policies[k].optimal_w, solve.grid, x, base)[0]
    raise ValueError(f"unknown policy lookup {lookup!r}")


def run_policy(batch: PathBatch, solve: SolveResult, spec: ContractSpec | None = None,
               market: MarketParams | None = None, lookup: str = "reoptimize") -> ScenarioStats:
    """Replay the solved policy along every path and aggregate the statistics.

    ``lookup="reoptimize"`` applies the solver's own jump maximisation at each
    simulated state; ``"interpolate"`` reads the optimal withdrawal off the
    policy surface bilinearly.

    When the solve used the ``"terminal"`` lower boundary, a contract whose
    account is exhausted pays the maturity amount of an empty account at the
    next date and then ends, which is exactly what that boundary prices.
    Under ``"propagated"`` the guaranteed withdrawals continue to maturity.
    """
    spec = spec or solve.spec
    market = market or solve.market
    if lookup not in LOOKUPS:
        raise ValueError(f"unknown policy lookup {lookup!r}")
    lapse_on_exhaustion = solve.grid.lower_boundary == "terminal"
    x_max = solve.grid.x_max * (1 + 1e-12)
    base_max = solve.grid.base_max * (1 + 1e-12)
    n = batch.n_paths
    N = spec.n_periods
    r = market.risk_free
    post_tax = 1.0 - spec.tax_rate

    x = np.full(n, spec.premium)
    base = np.full(n, spec.premium)
    alive = np.ones(n, dtype=bool)
    exhausted = np.zeros(n, dtype=bool)
    pv = np.zeros(n)
    deposits = np.zeros((n, N - 1))
    surrender_time = np.full(n, np.nan)
    counts = np.zeros(4)
    clamps = 0
    lookups = 0

    for k in range(1, N):
        t = spec.event_time(k)
        x = x * batch.returns[:, k - 1]
        if lapse_on_exhaustion:
            ending = alive & (x <= 0.0) & (base > 0.0)
            pv += np.where(ending, math.exp(-r * t) * cm.terminal_cashflow(0.0, base, spec), 0.0)
            exhausted |= ending
            alive &= ~ending
            base = np.where(ending, 0.0, base)

        fx = cm.fee_adjust(x, spec.guarantee_fee, spec.period)
        g = cm.guaranteed_amount(x, base, spec)
        wbar = cm.max_withdrawal(x, base, spec)
        w = np.zeros(n)
        if alive.any():
            w[alive] = _policy_withdrawal(solve, k, x[alive], base[alive], g[alive], wbar[alive], lookup)
            # states beyond the mesh are answered from its edge
            clamps += int(np.count_nonzero(alive & ((x > x_max) | (base > base_max))))
            lookups += int(alive.sum())
        w = np.clip(w, 0.0, wbar)

        cls, surrender = classify(w, g, fx)
        surrender &= alive
        w = np.where(surrender, fx, w)
        stays = alive & ~surrender
        counts += np.bincount(cls[stays], minlength=4)
        surrender_time[surrender] = t

        pv += math.exp(-r * t) * post_tax * w
        deposits[:, k - 1] = np.maximum(g - w, 0.0)
        x, base = cm.post_withdrawal_account(x, base, w, spec), cm.post_withdrawal_base(x, base, w, spec)
        alive &= ~surrender

    if lookups and clamps > MAX_CLAMP_FRACTION * lookups:
        raise ClampError(f"{clamps} of {lookups} policy lookups fell outside the grid")
    if clamps:
        log.warning("%d of %d policy lookups were clamped to the grid edge", clamps, lookups)

    x = x * batch.returns[:, N - 1]
    if lapse_on_exhaustion:
        ending = alive & (x <= 0.0) & (base > 0.0)
        exhausted |= ending
    times = np.array([spec.event_time(k) for k in range(1, N)])
    terminal = cm.cash_fund_payout(deposits, times, spec) + cm.terminal_cashflow(x, base, spec)
    pv += math.exp(-r * spec.maturity) * terminal

    surrendered = ~np.isnan(surrender_time)
    duration = np.where(surrendered, surrender_time, spec.maturity)
    total = counts.sum()
    props = counts / total if total > 0 else np.zeros(4)
    return ScenarioStats(
        surrender_rate=float(surrendered.mean()),
        avg_surrender_time=float(surrender_time[surrendered].mean()) if surrendered.any() else None,
        avg_duration=float(duration.mean()),
        proportions={name: float(p) for name, p in zip(CLASS_NAMES, props)},
        mc_value=float(math.fsum(pv) / n),
        mc_stderr=float(pv.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan"),
        n_paths=n,
        seed=batch.seed,
        exhaustion_rate=float(exhausted.mean()),
        clamp_count=clamps,
    )


def policy_ratio_export(solve: SolveResult, k: int):
    """Optimal withdrawal as a fraction of the guarantee and of the maximum, on the grid."""
    if k not in solve.policies:
        raise KeyError(f"{k} is not a withdrawal date")
    pol = solve.policies[k]
    return safe_ratio(pol.optimal_w, pol.guaranteed), safe_ratio(pol.optimal_w, pol.max_w)
