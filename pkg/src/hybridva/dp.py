"""Backward induction over withdrawal dates.

Each date is handled in two stages: the period solver carries the
pre-withdrawal surface of the next date back to the post-withdrawal surface
of this date, then the jump condition maximises running cash flow plus the
interpolated continuation over a grid of admissible withdrawals.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import contract as cm
from .contract import ContractSpec, MarketParams
from .pde import GridSpec, step_period

log = logging.getLogger(__name__)

N_WITHDRAWAL_POINTS = 81
TIE_RTOL = 1e-9


class Mode(str, enum.Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass
class PolicySurface:
    """Optimal withdrawal per grid node at one withdrawal date."""

    k: int
    optimal_w: np.ndarray
    guaranteed: np.ndarray
    max_w: np.ndarray

    @property
    def ratio_guar(self) -> np.ndarray:
        return safe_ratio(self.optimal_w, self.guaranteed)

    @property
    def ratio_max(self) -> np.ndarray:
        return safe_ratio(self.optimal_w, self.max_w)


@dataclass
class SolveResult:
    value_at_inception: float
    grid: GridSpec
    spec: ContractSpec
    market: MarketParams
    mode: Mode
    inception_surface: np.ndarray
    pre_surfaces: dict[int, np.ndarray] = field(default_factory=dict)
    post_surfaces: dict[int, np.ndarray] = field(default_factory=dict)
    policies: dict[int, PolicySurface] = field(default_factory=dict)
    clamp_count: int = 0


def safe_ratio(num, den):
    """Elementwise ``num / den`` with ``0 / 0`` taken as 0."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return out


@njit(cache=True)
def _bilinear_kernel(xs, gs, surface, xq, gq, out):
    nx = xs.size
    ng = gs.size
    for n in range(xq.size):
        xv = min(max(xq[n], xs[0]), xs[nx - 1])
        gv = min(max(gq[n], gs[0]), gs[ng - 1])
        i = min(max(np.searchsorted(xs, xv, "right") - 1, 0), nx - 2)
        j = min(max(np.searchsorted(gs, gv, "right") - 1, 0), ng - 2)
        tx = (xv - xs[i]) / (xs[i + 1] - xs[i])
        tg = (gv - gs[j]) / (gs[j + 1] - gs[j])
        out[n] = (1 - tx) * ((1 - tg) * surface[i, j] + tg * surface[i, j + 1]) + tx * (
            (1 - tg) * surface[i + 1, j] + tg * surface[i + 1, j + 1]
        )


def bilinear(surface: np.ndarray, grid: GridSpec, xq, gq):
    """Bilinear interpolation of a grid surface; queries are clamped to the mesh.

    Returns the interpolated values and the number of base queries that fell
    above ``base_max``.
    """
    xq, gq = np.broadcast_arrays(np.asarray(xq, dtype=float), np.asarray(gq, dtype=float))
    outside = int(np.count_nonzero(gq > grid.base_max * (1 + 1e-12)))
    out = np.empty(xq.size)
    _bilinear_kernel(grid.x, grid.base, np.ascontiguousarray(surface, dtype=float),
                     np.ascontiguousarray(xq).ravel(), np.ascontiguousarray(gq).ravel(), out)
    return out.reshape(xq.shape), outside


def terminal_surface(spec: ContractSpec, market: MarketParams, grid: GridSpec) -> np.ndarray:
    """Maturity payout evaluated on every grid node."""
    X, G = np.meshgrid(grid.x, grid.base, indexing="ij")
    return cm.terminal_cashflow(X, G, spec)


def withdrawal_grid(g: np.ndarray, wbar: np.ndarray, n: int = N_WITHDRAWAL_POINTS) -> np.ndarray:
    """Candidate withdrawals per node: ``n`` uniform points on ``[0, wbar]`` plus ``g``."""
    u = np.linspace(0.0, 1.0, n)
    W = wbar[..., None] * u
    W[..., -1] = wbar
    return np.concatenate([W, g[..., None]], axis=-1)


def apply_jump(v_plus: np.ndarray, k: int, spec: ContractSpec, market: MarketParams,
               grid: GridSpec, mode: Mode = Mode.DYNAMIC):
    """Pre-withdrawal surface and optimal policy at withdrawal date ``k``.

    Returns ``(v_minus, policy, clamp_count)``.
    """
    mode = Mode(mode)
    t = spec.event_time(k)
    X, G = np.meshgrid(grid.x, grid.base, indexing="ij")
    g = cm.guaranteed_amount(X, G, spec)
    wbar = cm.max_withdrawal(X, G, spec)

    if mode is Mode.STATIC:
        W = g[..., None]
    else:
        W = withdrawal_grid(g, wbar)

    Xe = X[..., None]
    Ge = G[..., None]
    hx = cm.post_withdrawal_account(Xe, Ge, W, spec)
    hg = cm.post_withdrawal_base(Xe, Ge, W, spec)
    hx = np.where(hx <= 0.0, grid.x_min, hx)
    cont, clamps = bilinear(v_plus, grid, hx, hg)
    vals = cm.running_cashflow(t, Xe, Ge, W, spec, market) + cont

    if mode is Mode.STATIC:
        v_minus = vals[..., 0]
        w_opt = g.copy()
    else:
        best = vals.max(axis=-1)
        near = vals >= best[..., None] - TIE_RTOL * (1.0 + np.abs(best[..., None]))
        w_opt = np.where(near, W, np.inf).min(axis=-1)
        v_minus = best
    if clamps:
        log.warning("date %d: %d base queries clamped to base_max", k, clamps)
    return v_minus, PolicySurface(k=k, optimal_w=w_opt, guaranteed=g, max_w=wbar), clamps


def value_contract(spec: ContractSpec, market: MarketParams, grid: GridSpec,
                   mode: Mode = Mode.DYNAMIC, keep_surfaces: bool = True) -> SolveResult:
    """Solve the withdrawal problem by backward induction and value it at inception."""
    mode = Mode(mode)
    n = spec.n_periods
    v = terminal_surface(spec, market, grid)
    result = SolveResult(value_at_inception=np.nan, grid=grid, spec=spec, market=market,
                         mode=mode, inception_surface=v)
    if keep_surfaces:
        result.pre_surfaces[n] = v
    lower = None
    if grid.lower_boundary == "terminal":
        lower = cm.terminal_cashflow(0.0, grid.base, spec)
    clamps = 0
    for k in range(n - 1, 0, -1):
        v_plus = step_period(v, spec, market, grid, lower)
        v, policy, c = apply_jump(v_plus, k, spec, market, grid, mode)
        clamps += c
        if keep_surfaces:
            result.post_surfaces[k] = v_plus
            result.pre_surfaces[k] = v
        result.policies[k] = policy
    v0 = step_period(v, spec, market, grid, lower)
    value, _ = bilinear(v0, grid, spec.premium, spec.premium)
    result.inception_surface = v0
    result.value_at_inception = float(value)
    result.clamp_count = clamps
    return result
