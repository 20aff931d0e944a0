"""Contract state transitions and policyholder cash flows.

All functions accept scalars or numpy arrays and broadcast elementwise, so the
same code serves single-state checks, whole-grid jump evaluation and
path-wise simulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


class ContractError(ValueError):
    """Raised for an inadmissible withdrawal or an invalid contract input."""


@dataclass(frozen=True)
class ContractSpec:
    """Contractual parameters of the hybrid variable annuity.

    ``guarantee_fee`` and ``cash_rate`` are annual fractions (not basis points).
    """

    premium: float = 100.0
    maturity: float = 10.0
    period: float = 1.0
    withdrawal_rate: float = 0.10
    guarantee_fee: float = 0.0
    ratchet: bool = True
    cash_fund: bool = True
    cash_rate: float = 0.04
    tax_rate: float = 0.0

    def __post_init__(self):
        n = self.maturity / self.period
        if not (self.premium > 0):
            raise ContractError(f"premium must be positive, got {self.premium}")
        if abs(n - round(n)) > 1e-9 or round(n) < 2:
            raise ContractError(
                f"maturity/period must be an integer >= 2, got {self.maturity}/{self.period}"
            )
        if not (0 < self.withdrawal_rate <= 1):
            raise ContractError(f"withdrawal_rate must lie in (0, 1], got {self.withdrawal_rate}")
        if not (0 <= self.guarantee_fee * self.period < 1):
            raise ContractError(f"guarantee_fee * period must lie in [0, 1), got {self.guarantee_fee}")
        if not (0 <= self.tax_rate < 1):
            raise ContractError(f"tax_rate must lie in [0, 1), got {self.tax_rate}")
        if self.cash_rate < 0:
            raise ContractError(f"cash_rate must be nonnegative, got {self.cash_rate}")

    @property
    def n_periods(self) -> int:
        return int(round(self.maturity / self.period))

    def event_time(self, k: int) -> float:
        return k * self.period

    def with_fee(self, fee: float) -> "ContractSpec":
        return replace(self, guarantee_fee=fee)


@dataclass(frozen=True)
class MarketParams:
    """Risk-neutral market: short rate, equity volatility and equity exposure."""

    risk_free: float = 0.03
    volatility: float = 0.20
    equity_exposure: float = 0.80

    def __post_init__(self):
        if self.risk_free < 0:
            raise ContractError(f"risk_free must be nonnegative, got {self.risk_free}")
        if not (self.volatility > 0):
            raise ContractError(f"volatility must be positive, got {self.volatility}")
        if not (0 <= self.equity_exposure <= 1):
            raise ContractError(f"equity_exposure must lie in [0, 1], got {self.equity_exposure}")

    @property
    def effective_volatility(self) -> float:
        return self.equity_exposure * self.volatility


@dataclass(frozen=True)
class ContractState:
    """Pre-event account value and benefit base at a withdrawal date."""

    account: float
    base: float

    def __post_init__(self):
        if self.account < 0 or self.base < 0:
            raise ContractError(f"state must be nonnegative, got {self}")


def fee_adjust(x, fee, period):
    """Post-fee account value ``x * (1 - fee * period)``."""
    return x * (1.0 - fee * period)


def guaranteed_amount(x, base, spec: ContractSpec):
    """Guaranteed withdrawal amount for pre-event account ``x`` and base ``base``."""
    if spec.ratchet:
        return spec.withdrawal_rate * np.maximum(fee_adjust(x, spec.guarantee_fee, spec.period), base)
    return spec.withdrawal_rate * (base + 0.0 * x)


def ratcheted_base(x, base, spec: ContractSpec):
    """Benefit base after the ratchet and before any excess-withdrawal reduction."""
    if spec.ratchet:
        return np.maximum(fee_adjust(x, spec.guarantee_fee, spec.period), base)
    return base + 0.0 * x


def max_withdrawal(x, base, spec: ContractSpec):
    """Upper end of the admissible withdrawal interval ``[0, w_max]``."""
    return np.maximum(fee_adjust(x, spec.guarantee_fee, spec.period), guaranteed_amount(x, base, spec))


def check_admissible(x, base, w, spec: ContractSpec, rtol: float = 1e-12):
    wbar = max_withdrawal(x, base, spec)
    w = np.asarray(w, dtype=float)
    bad = (w < 0) | (w > wbar * (1 + rtol) + rtol)
    if np.any(bad):
        raise ContractError("withdrawal outside the admissible interval [0, w_max]")


def post_withdrawal_account(x, base, w, spec: ContractSpec):
    """Account value right after withdrawing ``w``.

    The account is always debited by the full guaranteed amount; any shortfall
    ``g - w`` goes to the cash fund (or is forfeited without one).
    """
    fx = fee_adjust(x, spec.guarantee_fee, spec.period)
    g = guaranteed_amount(x, base, spec)
    return np.maximum(0.0, fx - g - np.maximum(w - g, 0.0))


def post_withdrawal_base(x, base, w, spec: ContractSpec):
    """Benefit base right after withdrawing ``w``.

    Excess withdrawals reduce the (ratcheted, or locked without ratchet) base
    in proportion to the excess relative to the account left after ``g``.
    """
    fx = fee_adjust(x, spec.guarantee_fee, spec.period)
    g = guaranteed_amount(x, base, spec)
    gh = ratcheted_base(x, base, spec)
    excess = np.maximum(w - g, 0.0)
    room = fx - g
    if np.any((excess > 0) & (room <= 0)):
        raise ContractError("excess withdrawal requested while the account does not exceed the guarantee")
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(excess > 0, excess / np.where(room > 0, room, 1.0), 0.0)
    return gh * np.maximum(1.0 - frac, 0.0)


def cash_fund_factor(t, spec: ContractSpec, market: MarketParams):
    """Time-``t`` value of one unit deposited in the cash fund, net of tax on interest."""
    if not spec.cash_fund:
        return 0.0
    tau = spec.maturity - t
    theta = spec.tax_rate
    return (1 - theta) * math.exp(-(market.risk_free - spec.cash_rate) * tau) + theta * math.exp(
        -market.risk_free * tau
    )


def running_cashflow(t, x, base, w, spec: ContractSpec, market: MarketParams):
    """Post-tax value at ``t`` of the withdrawal plus any cash-fund deposit."""
    g = guaranteed_amount(x, base, spec)
    return (1 - spec.tax_rate) * w + cash_fund_factor(t, spec, market) * np.maximum(g - w, 0.0)


def terminal_cashflow(x, base, spec: ContractSpec):
    """Post-tax maturity payout: the larger of the post-fee account and the guarantee."""
    fx = fee_adjust(x, spec.guarantee_fee, spec.period)
    return (1 - spec.tax_rate) * np.maximum(fx, guaranteed_amount(x, base, spec))


def cash_fund_payout(deposits, times, spec: ContractSpec):
    """Maturity balance of the cash fund (after tax on interest) from dated deposits."""
    deposits = np.asarray(deposits, dtype=float)
    times = np.asarray(times, dtype=float)
    if not spec.cash_fund:
        return np.zeros(deposits.shape[:-1]) if deposits.ndim > 1 else 0.0
    theta = spec.tax_rate
    growth = (1 - theta) * np.exp(spec.cash_rate * (spec.maturity - times)) + theta
    return np.sum(deposits * growth, axis=-1)
