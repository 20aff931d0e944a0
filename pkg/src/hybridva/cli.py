"""Command line front end: price, fair-fee, policy and simulate."""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .calibrate import FeeStatus, fair_fee
from .config import Cell, ConfigError, RunConfig, load_config, stable_hash
from .contract import ContractError
from .dp import value_contract
from .pde import build_grid
from .simulate import CLASS_NAMES, ClampError, policy_ratio_export, run_policy, simulate_paths

log = logging.getLogger("hybridva")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NA = "NA"
NUMERIC_FAULTS = (FloatingPointError, ClampError, ContractError, np.linalg.LinAlgError, RuntimeError)

CELL_COLUMNS = ["mode", "cash_fund", "ratchet", "tax_rate", "cash_rate"]
PRICE_COLUMNS = CELL_COLUMNS + ["fee_bps", "value", "premium_gap", "spec_hash", "config_hash"]
FEE_COLUMNS = CELL_COLUMNS + ["status", "fee_bps", "value_at_root", "gap_at_root", "sign_changes",
                              "n_x", "n_base", "n_tau", "lower_boundary", "spec_hash", "config_hash"]
SIM_COLUMNS = CELL_COLUMNS + ["fee_bps", "surrender_rate", "avg_surrender_time", "avg_duration",
                              *CLASS_NAMES, "dp_value", "mc_value", "mc_stderr", "exhaustion_rate",
                              "n_paths", "seed", "spec_hash", "config_hash"]


def _fmt(v, digits=6):
    if v is None:
        return NA
    if isinstance(v, bool):
        return "TRUE" if v else "FALSE"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return NA if not np.isfinite(v) else f"{v:.{digits}f}"
    return str(v)


def _cell_fields(cell: Cell) -> dict:
    return {"mode": cell.mode.value, "cash_fund": _fmt(cell.cash_fund), "ratchet": _fmt(cell.ratchet),
            "tax_rate": _fmt(cell.tax_rate, 4), "cash_rate": _fmt(cell.cash_rate, 4)}


def _spec_hash(cfg: RunConfig, cell: Cell, fee_bps: float) -> str:
    spec = cfg.spec_for(cell, fee_bps)
    return stable_hash({"spec": asdict(spec), "market": asdict(cfg.market), "grid": asdict(cfg.grid),
                        "mode": cell.mode.value})


def _na_row(columns, base: dict) -> dict:
    return {c: base.get(c, NA) for c in columns}


def _calibrated(cfg: RunConfig, cell: Cell):
    spec = cfg.spec_for(cell)
    return fair_fee(spec, cfg.market, build_grid(spec, cfg.grid), cell.mode, cfg.calibration)


# one job per scenario cell; each returns a CSV row dict

def price_job(cfg: RunConfig, cell: Cell) -> dict:
    fee = cfg.contract.fee_bps
    spec = cfg.spec_for(cell)
    res = value_contract(spec, cfg.market, build_grid(spec, cfg.grid), cell.mode, keep_surfaces=False)
    row = _cell_fields(cell)
    row.update(fee_bps=_fmt(fee, 4), value=_fmt(res.value_at_inception),
               premium_gap=_fmt(spec.premium - res.value_at_inception),
               spec_hash=_spec_hash(cfg, cell, fee), config_hash=cfg.config_hash)
    return row


def fee_job(cfg: RunConfig, cell: Cell) -> dict:
    res = _calibrated(cfg, cell)
    row = _cell_fields(cell)
    g = cfg.grid
    row.update(status=res.status.value, fee_bps=_fmt(res.fee_bps, 4), value_at_root=_fmt(res.value_at_root),
               gap_at_root=_fmt(res.gap_at_root), sign_changes=_fmt(res.sign_changes), n_x=g.n_x,
               n_base=g.n_base, n_tau=g.n_tau, lower_boundary=g.lower_boundary,
               spec_hash=_spec_hash(cfg, cell, res.fee_bps if res.viable else 0.0),
               config_hash=cfg.config_hash)
    return _na_row(FEE_COLUMNS, row)


def simulate_cell(cfg: RunConfig, cell: Cell):
    """Calibrate (or take the contract fee), solve and replay one cell.

    Returns ``(calibration, fee_bps, dp_value, stats)``; the last three are None
    when calibration does not produce a fee.
    """
    calib = None
    if cfg.simulation.fee == "calibrate":
        calib = _calibrated(cfg, cell)
        if calib.status is not FeeStatus.OK:
            return calib, None, None, None
        fee = calib.fee_bps
    else:
        fee = cfg.contract.fee_bps
    spec = cfg.spec_for(cell, fee)
    solve = value_contract(spec, cfg.market, build_grid(spec, cfg.grid), cell.mode)
    sim = cfg.simulation
    stats = run_policy(simulate_paths(sim.n_paths, sim.seed, cfg.market, spec), solve,
                       lookup=cfg.mode.lookup)
    return calib, fee, solve.value_at_inception, stats


def simulate_job(cfg: RunConfig, cell: Cell) -> dict:
    row = _cell_fields(cell)
    row["config_hash"] = cfg.config_hash
    _, fee, value, stats = simulate_cell(cfg, cell)
    if stats is None:
        return _na_row(SIM_COLUMNS, row)
    row.update(fee_bps=_fmt(fee, 4), surrender_rate=_fmt(stats.surrender_rate, 4),
               avg_surrender_time=_fmt(stats.avg_surrender_time, 4),
               avg_duration=_fmt(stats.avg_duration, 4),
               dp_value=_fmt(value), mc_value=_fmt(stats.mc_value),
               mc_stderr=_fmt(stats.mc_stderr), exhaustion_rate=_fmt(stats.exhaustion_rate, 4),
               n_paths=stats.n_paths, seed=stats.seed, spec_hash=_spec_hash(cfg, cell, fee))
    row.update({name: _fmt(p, 4) for name, p in stats.proportions.items()})
    return _na_row(SIM_COLUMNS, row)


def policy_job(cfg: RunConfig, cell: Cell) -> dict:
    """Ratio surfaces per requested date, as plain arrays keyed by file stem."""
    fee = cfg.contract.fee_bps
    if cfg.policy.fee == "calibrate":
        calib = _calibrated(cfg, cell)
        if calib.status is not FeeStatus.OK:
            return {"fee_bps": None, "surfaces": {}}
        fee = calib.fee_bps
    spec = cfg.spec_for(cell, fee)
    grid = build_grid(spec, cfg.grid)
    solve = value_contract(spec, cfg.market, grid, cell.mode, keep_surfaces=False)
    surfaces = {}
    for k in cfg.policy.dates:
        guar, wmax = policy_ratio_export(solve, k)
        surfaces[f"policy_t{k}_guar"] = guar
        surfaces[f"policy_t{k}_max"] = wmax
    return {"fee_bps": fee, "x": grid.x, "base": grid.base, "surfaces": surfaces}


def _run_cells(job, cfg: RunConfig, threads: int) -> list:
    cells = cfg.cells()
    if threads <= 1 or len(cells) <= 1:
        return [job(cfg, c) for c in cells]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        # map keeps submission order, so output order follows the cell order
        return list(pool.map(job, [cfg] * len(cells), cells))


def _write_csv(path: Path, columns: list, rows: list):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _write_surface(path: Path, x, base, values):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x\\base", *(f"{g:.6f}" for g in base)])
        for xi, row in zip(x, values):
            writer.writerow([f"{xi:.6f}", *(f"{v:.6f}" for v in row)])


def _write_manifest(out: Path, command: str, cfg: RunConfig, files: list):
    manifest = {
        "command": command,
        "version": __version__,
        "config_hash": cfg.config_hash,
        "config": cfg.resolved(),
        "files": sorted(files),
        "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_price(cfg, out, threads):
    rows = _run_cells(price_job, cfg, threads)
    _write_csv(out / "price.csv", PRICE_COLUMNS, rows)
    return ["price.csv"]


def cmd_fair_fee(cfg, out, threads):
    rows = _run_cells(fee_job, cfg, threads)
    _write_csv(out / "fair_fee.csv", FEE_COLUMNS, rows)
    return ["fair_fee.csv"]


def cmd_simulate(cfg, out, threads):
    rows = _run_cells(simulate_job, cfg, threads)
    _write_csv(out / "simulate.csv", SIM_COLUMNS, rows)
    return ["simulate.csv"]


def cmd_policy(cfg, out, threads):
    n = cfg.spec_for(cfg.cells()[0]).n_periods
    bad = [k for k in cfg.policy.dates if not 1 <= k <= n - 1]
    if bad:
        raise ConfigError(f"policy.dates: {bad[0]} is not a withdrawal date (1..{n - 1})")
    cells = cfg.cells()
    results = _run_cells(policy_job, cfg, threads)
    files = []
    index = []
    for i, (cell, res) in enumerate(zip(cells, results)):
        sub = out if len(cells) == 1 else out / f"cell{i:02d}"
        sub.mkdir(parents=True, exist_ok=True)
        for stem, values in res["surfaces"].items():
            path = sub / f"{stem}.csv"
            _write_surface(path, res["x"], res["base"], values)
            files.append(str(path.relative_to(out)))
        index.append({**_cell_fields(cell), "cell": i, "fee_bps": _fmt(res["fee_bps"], 4)})
    if len(cells) > 1:
        _write_csv(out / "cells.csv", ["cell", *CELL_COLUMNS, "fee_bps"], index)
        files.append("cells.csv")
    return files


COMMANDS = {"price": cmd_price, "fair-fee": cmd_fair_fee, "policy": cmd_policy, "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridva", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML run configuration (defaults apply when omitted)")
        p.add_argument("--out", help="output directory (overrides [output].dir)")
        p.add_argument("--seed", type=int, help="simulation seed (overrides [simulation].seed)")
        p.add_argument("--threads", type=int, default=1, help="worker processes for scenario cells")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed: must be an unsigned 64-bit integer")
            cfg = replace(cfg, simulation=replace(cfg.simulation, seed=args.seed))
        if args.out is not None:
            cfg = replace(cfg, output=replace(cfg.output, dir=args.out))
        if args.threads < 1:
            raise ConfigError("--threads: must be at least 1")
        out = Path(cfg.output.dir)
        out.mkdir(parents=True, exist_ok=True)
        files = COMMANDS[args.command](cfg, out, args.threads)
        _write_manifest(out, args.command, cfg, files)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_FAULTS as exc:
        print(f"numerical fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
