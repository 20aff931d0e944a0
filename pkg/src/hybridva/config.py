"""Run configuration: TOML ingestion, validation and scenario cells."""

from __future__ import annotations

import hashlib
import itertools
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .calibrate import BPS, FeeSweep
from .contract import ContractError, ContractSpec, MarketParams
from .dp import Mode
from .pde import LOWER_BOUNDARIES, SPACINGS, GridConfig, build_grid
from .simulate import DEFAULT_PATHS, DEFAULT_SEED, LOOKUPS


class ConfigError(ValueError):
    """Malformed or invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class ContractBlock:
    premium: float = 100.0
    maturity: float = 10.0
    period: float = 1.0
    withdrawal_rate: float = 0.10
    fee_bps: float = 0.0
    ratchet: bool = True
    cash_fund: bool = True
    cash_rate: float = 0.04
    tax_rate: float = 0.0


@dataclass(frozen=True)
class ModeBlock:
    strategy: str = "dynamic"
    lookup: str = "reoptimize"


@dataclass(frozen=True)
class SweepBlock:
    """Scenario lists; an empty list keeps the single value from [contract]/[mode]."""

    strategies: tuple = ()
    cash_fund: tuple = ()
    ratchet: tuple = ()
    tax_rates: tuple = ()
    cash_rates: tuple = ()


@dataclass(frozen=True)
class SimulationBlock:
    n_paths: int = DEFAULT_PATHS
    seed: int = DEFAULT_SEED
    fee: str = "calibrate"  # or "contract": use [contract].fee_bps as given


@dataclass(frozen=True)
class PolicyBlock:
    dates: tuple = (1, 5, 9)
    fee: str = "contract"  # or "calibrate": export the policy at the fair fee


@dataclass(frozen=True)
class OutputBlock:
    dir: str = "out"


@dataclass(frozen=True)
class RunConfig:
    contract: ContractBlock = field(default_factory=ContractBlock)
    market: MarketParams = field(default_factory=MarketParams)
    grid: GridConfig = field(default_factory=GridConfig)
    mode: ModeBlock = field(default_factory=ModeBlock)
    calibration: FeeSweep = field(default_factory=FeeSweep)
    sweep: tuple = (SweepBlock(),)
    simulation: SimulationBlock = field(default_factory=SimulationBlock)
    policy: PolicyBlock = field(default_factory=PolicyBlock)
    output: OutputBlock = field(default_factory=OutputBlock)

    def resolved(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @property
    def config_hash(self) -> str:
        # the output location does not change any result
        d = self.resolved()
        d.pop("output")
        return stable_hash(d)

    def cells(self) -> list["Cell"]:
        """Scenario cells in output order.

        Each sweep block is a cross product, outermost first: strategy, cash
        fund, ratchet, tax rate, cash rate. Blocks are concatenated.
        """
        c = self.contract
        out = []
        for s in self.sweep:
            axes = (
                s.strategies or (self.mode.strategy,),
                s.cash_fund or (c.cash_fund,),
                s.ratchet or (c.ratchet,),
                s.tax_rates or (c.tax_rate,),
                s.cash_rates or (c.cash_rate,),
            )
            out += [Cell(Mode(m), bool(cf), bool(rt), float(th), float(eta))
                    for m, cf, rt, th, eta in itertools.product(*axes)]
        return out

    def spec_for(self, cell: "Cell", fee_bps: float | None = None) -> ContractSpec:
        c = self.contract
        fee = c.fee_bps if fee_bps is None else fee_bps
        return ContractSpec(premium=c.premium, maturity=c.maturity, period=c.period,
                            withdrawal_rate=c.withdrawal_rate, guarantee_fee=fee * BPS,
                            ratchet=cell.ratchet, cash_fund=cell.cash_fund,
                            cash_rate=cell.cash_rate, tax_rate=cell.tax_rate)


@dataclass(frozen=True)
class Cell:
    mode: Mode
    cash_fund: bool
    ratchet: bool
    tax_rate: float
    cash_rate: float

    def key(self) -> dict:
        return {"mode": self.mode.value, "cash_fund": self.cash_fund, "ratchet": self.ratchet,
                "tax_rate": self.tax_rate, "cash_rate": self.cash_rate}


def stable_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


_SECTIONS = {
    "contract": ContractBlock,
    "market": MarketParams,
    "grid": GridConfig,
    "mode": ModeBlock,
    "calibration": FeeSweep,
    "sweep": SweepBlock,
    "simulation": SimulationBlock,
    "policy": PolicyBlock,
    "output": OutputBlock,
}

_CHOICES = {
    ("grid", "spacing"): SPACINGS,
    ("grid", "base_spacing"): SPACINGS,
    ("grid", "lower_boundary"): LOWER_BOUNDARIES,
    ("mode", "strategy"): tuple(m.value for m in Mode),
    ("mode", "lookup"): LOOKUPS,
    ("simulation", "fee"): ("calibrate", "contract"),
    ("policy", "fee"): ("calibrate", "contract"),
}


def _coerce(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or default is None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        choices = _CHOICES.get((section, key))
        if choices and value not in choices:
            raise ConfigError(f"{where}: {value!r} is not one of {', '.join(choices)}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _check_list(section: str, key: str, values: tuple, kind):
    for v in values:
        ok = isinstance(v, bool) if kind is bool else (isinstance(v, kind) and not isinstance(v, bool))
        if not ok:
            raise ConfigError(f"{section}.{key}: bad entry {v!r}")


def _block(section: str, cls, body):
    if not isinstance(body, dict):
        raise ConfigError(f"{section}: expected a table")
    defaults = cls()
    names = {f.name for f in fields(cls)}
    bad = set(body) - names
    if bad:
        raise ConfigError(f"{section}.{sorted(bad)[0]}: unknown key")
    values = {k: _coerce(section, k, v, getattr(defaults, k)) for k, v in body.items()}
    try:
        return replace(defaults, **values)
    except (ContractError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _sweep_block(body) -> SweepBlock:
    sw = _block("sweep", SweepBlock, body)
    _check_list("sweep", "strategies", sw.strategies, str)
    for m in sw.strategies:
        if m not in _CHOICES[("mode", "strategy")]:
            raise ConfigError(f"sweep.strategies: {m!r} is not a strategy")
    _check_list("sweep", "cash_fund", sw.cash_fund, bool)
    _check_list("sweep", "ratchet", sw.ratchet, bool)
    _check_list("sweep", "tax_rates", sw.tax_rates, (int, float))
    _check_list("sweep", "cash_rates", sw.cash_rates, (int, float))
    return replace(sw, tax_rates=tuple(float(v) for v in sw.tax_rates),
                   cash_rates=tuple(float(v) for v in sw.cash_rates))


def from_dict(raw: dict) -> RunConfig:
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown section")
    blocks = {}
    for section, cls in _SECTIONS.items():
        if section != "sweep":
            blocks[section] = _block(section, cls, raw.get(section, {}))

    sweeps = raw.get("sweep", {})
    if isinstance(sweeps, dict):
        sweeps = [sweeps]
    if not isinstance(sweeps, list) or not sweeps:
        raise ConfigError("sweep: expected a table or an array of tables")
    blocks["sweep"] = tuple(_sweep_block(body) for body in sweeps)
    _check_list("policy", "dates", blocks["policy"].dates, int)

    sim = blocks["simulation"]
    if sim.n_paths < 1:
        raise ConfigError("simulation.n_paths: must be positive")
    if not (0 <= sim.seed < 2**64):
        raise ConfigError("simulation.seed: must be an unsigned 64-bit integer")

    cfg = RunConfig(**blocks)
    # build every contract once so invalid combinations fail at load time
    for cell in cfg.cells():
        try:
            spec = cfg.spec_for(cell)
        except ContractError as exc:
            raise ConfigError(f"contract: {exc}") from None
    try:
        build_grid(spec, cfg.grid)
    except ContractError as exc:
        raise ConfigError(f"grid: {exc}") from None
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config: {exc}") from None
    return from_dict(raw)
