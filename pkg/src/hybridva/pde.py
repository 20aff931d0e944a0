"""Method-of-lines solver for the between-dates continuation value.

Between two withdrawal dates the benefit base is frozen, so each base slice
solves an independent one-dimensional Black-Scholes type problem in the
account value. Time runs forward in time-to-go; each time level is a linear
two-point boundary value problem in ``x`` discretised by finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .contract import ContractError, ContractSpec, MarketParams

DIFFUSION_FLOOR = 1e-6
SPACINGS = ("uniform", "geometric", "sinh")
LOWER_BOUNDARIES = ("terminal", "propagated")


@dataclass(frozen=True)
class GridConfig:
    """Mesh and solver settings.

    ``x_max`` and ``base_max`` default to ``domain_multiple * premium``. The
    account axis is clustered around the premium (``sinh`` spacing with scale
    ``sinh_scale * premium``); the base axis is uniform.

    ``lower_boundary`` selects the Dirichlet data used at ``x_min`` during the
    backward induction: ``"terminal"`` discounts the maturity payout of an empty
    account in every period, ``"propagated"`` discounts the lower edge of the
    surface being carried back.
    """

    n_x: int = 80
    n_base: int = 80
    n_tau: int = 50
    x_min: float = 1e-6
    x_max: float | None = None
    base_max: float | None = None
    spacing: str = "sinh"
    base_spacing: str = "uniform"
    sinh_scale: float = 0.2
    domain_multiple: float = 5.0
    lower_boundary: str = "terminal"


@dataclass(frozen=True)
class GridSpec:
    """Node arrays for the (account, base) mesh and the per-period time steps."""

    x: np.ndarray
    base: np.ndarray
    n_tau: int
    lower_boundary: str = "terminal"

    def __post_init__(self):
        if self.lower_boundary not in LOWER_BOUNDARIES:
            raise ContractError(f"unknown lower boundary {self.lower_boundary!r}")
        if self.x.size < 3 or self.base.size < 2:
            raise ContractError("grid needs at least 3 account nodes and 2 base nodes")
        if self.n_tau < 3:
            raise ContractError("n_tau must be at least 3 for the three-level scheme")
        if np.any(np.diff(self.x) <= 0) or np.any(np.diff(self.base) <= 0):
            raise ContractError("grid nodes must be strictly increasing")
        if self.x[0] <= 0:
            raise ContractError("x_min must be strictly positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.x.size, self.base.size)

    @property
    def x_min(self) -> float:
        return float(self.x[0])

    @property
    def x_max(self) -> float:
        return float(self.x[-1])

    @property
    def base_max(self) -> float:
        return float(self.base[-1])


def _nodes(lo: float, hi: float, n: int, spacing: str, centre: float, scale: float) -> np.ndarray:
    if spacing == "uniform":
        return np.linspace(lo, hi, n)
    if spacing == "geometric":
        # geometric in distance from lo, so lo itself stays a node
        out = lo + np.geomspace(1.0, hi - lo + 1.0, n) - 1.0
        out[0], out[-1] = lo, hi
        return out
    if spacing == "sinh":
        centre = min(max(centre, lo), hi)
        xi = np.linspace(np.arcsinh((lo - centre) / scale), np.arcsinh((hi - centre) / scale), n)
        out = centre + scale * np.sinh(xi)
        out[0], out[-1] = lo, hi
        return out
    raise ContractError(f"unknown spacing {spacing!r}")


def _force_node(nodes: np.ndarray, value: float) -> np.ndarray:
    """Move the nearest interior node onto ``value`` (node count unchanged)."""
    if value <= nodes[0] or value >= nodes[-1] or np.any(nodes == value):
        return nodes
    interior = np.arange(1, nodes.size - 1)
    if interior.size == 0:
        return nodes
    i = interior[np.argmin(np.abs(nodes[interior] - value))]
    out = nodes.copy()
    out[i] = value
    if np.any(np.diff(out) <= 0):
        out = np.unique(np.append(nodes, value))
    return out


def build_grid(spec: ContractSpec, config: GridConfig = GridConfig()) -> GridSpec:
    """Account and base nodes; the premium is always a node in both directions."""
    x_max = config.x_max if config.x_max is not None else config.domain_multiple * spec.premium
    base_max = config.base_max if config.base_max is not None else config.domain_multiple * spec.premium
    if not (0 < config.x_min < x_max) or base_max <= 0:
        raise ContractError(f"infeasible grid bounds x in [{config.x_min}, {x_max}], base in [0, {base_max}]")
    if config.n_x < 3 or config.n_base < 2:
        raise ContractError("grid needs n_x >= 3 and n_base >= 2")
    scale = config.sinh_scale * spec.premium
    x = _nodes(config.x_min, x_max, config.n_x, config.spacing, spec.premium, scale)
    base = _nodes(0.0, base_max, config.n_base, config.base_spacing, spec.premium, scale)
    return GridSpec(x=_force_node(x, spec.premium), base=_force_node(base, spec.premium),
                    n_tau=config.n_tau, lower_boundary=config.lower_boundary)


class PeriodSolver:
    """Pre-factored time stepper for one period on a fixed account grid.

    The operator does not depend on the base, so one factorisation serves every
    slice and every period; only right-hand sides change.
    """

    def __init__(self, x: np.ndarray, r: float, vol: float, period: float, n_tau: int):
        self.x = np.asarray(x, dtype=float)
        self.r = r
        self.period = period
        self.n_tau = n_tau
        self.dtau = period / n_tau
        a = np.maximum(0.5 * (vol * self.x) ** 2, DIFFUSION_FLOOR)
        b = r * self.x
        self._space = self._space_operator(a, b)
        self._lu_first = lu_factor(self._system(r + 1.0 / self.dtau))
        self._lu_bdf2 = lu_factor(self._system(r + 1.5 / self.dtau))

    def _space_operator(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        x = self.x
        n = x.size
        L = np.zeros((n, n))
        for i in range(1, n - 1):
            hm = x[i] - x[i - 1]
            hp = x[i + 1] - x[i]
            s = hm + hp
            # diffusion, nonuniform three-point stencil
            L[i, i - 1] += 2 * a[i] / (hm * s)
            L[i, i] -= 2 * a[i] / (hm * hp)
            L[i, i + 1] += 2 * a[i] / (hp * s)
            # drift: central where it keeps the stencil monotone, forward otherwise
            if b[i] * max(hm, hp) <= 2 * a[i]:
                L[i, i - 1] -= b[i] * hp / (hm * s)
                L[i, i] += b[i] * (hp - hm) / (hm * hp)
                L[i, i + 1] += b[i] * hm / (hp * s)
            else:
                L[i, i] -= b[i] / hp
                L[i, i + 1] += b[i] / hp
        return L

    def _system(self, c: float) -> np.ndarray:
        n = self.x.size
        A = self._space.copy()
        A[np.arange(1, n - 1), np.arange(1, n - 1)] -= c
        A[0, :] = 0.0
        A[0, 0] = 1.0
        # vanishing second derivative at x_max: last three nodes collinear
        h1 = self.x[-1] - self.x[-2]
        h2 = self.x[-2] - self.x[-3]
        A[-1, :] = 0.0
        A[-1, -1] = 1.0
        A[-1, -2] = -(1.0 + h1 / h2)
        A[-1, -3] = h1 / h2
        return A

    def solve(self, initial: np.ndarray, lower: np.ndarray | None = None) -> np.ndarray:
        """Advance ``initial`` (shape ``(n_x, k)``) over one full period.

        ``lower`` is the undiscounted Dirichlet value at ``x_min`` per column;
        it defaults to the first row of ``initial``.
        """
        u0 = np.asarray(initial, dtype=float)
        lower = u0[0].copy() if lower is None else np.asarray(lower, dtype=float)
        dt = self.dtau
        prev2 = None
        prev = u0
        for n in range(1, self.n_tau + 1):
            if n <= 2:
                rhs = -prev / dt
                lu = self._lu_first
            else:
                rhs = -(4 * prev - prev2) / (2 * dt)
                lu = self._lu_bdf2
            rhs = rhs.copy()
            rhs[0] = np.exp(-self.r * n * dt) * lower
            rhs[-1] = 0.0
            cur = lu_solve(lu, rhs)
            prev2, prev = prev, cur
        return prev


_SOLVER_CACHE: dict = {}


def period_solver(grid: GridSpec, spec: ContractSpec, market: MarketParams) -> PeriodSolver:
    key = (grid.x.tobytes(), market.risk_free, market.effective_volatility, spec.period, grid.n_tau)
    solver = _SOLVER_CACHE.get(key)
    if solver is None:
        if len(_SOLVER_CACHE) > 32:
            _SOLVER_CACHE.clear()
        solver = PeriodSolver(grid.x, market.risk_free, market.effective_volatility, spec.period, grid.n_tau)
        _SOLVER_CACHE[key] = solver
    return solver


def step_period(v_next: np.ndarray, spec: ContractSpec, market: MarketParams, grid: GridSpec,
                lower: np.ndarray | None = None) -> np.ndarray:
    """Continuation value one period earlier, slice by slice in the base.

    ``v_next`` is the value surface at the next pre-withdrawal instant, shaped
    ``(n_x, n_base)``; the result is the post-withdrawal surface one period
    before it. ``lower`` overrides the value at ``x_min`` that gets discounted
    along the lower boundary (default: ``v_next[0]``).
    """
    v_next = np.asarray(v_next, dtype=float)
    if v_next.shape != grid.shape:
        raise ContractError(f"surface shape {v_next.shape} does not match grid {grid.shape}")
    if not np.all(np.isfinite(v_next)):
        raise FloatingPointError("non-finite entries in value surface")
    out = period_solver(grid, spec, market).solve(v_next, lower)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("period solve produced non-finite values")
    return out
