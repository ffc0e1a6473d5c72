"""Write a RunReport to disk as CSV traces, the chain log and a JSON summary."""
from __future__ import annotations

import csv
import json
from pathlib import Path

from voltchain.harness.runner import RunReport
from voltchain.ledger import serialize_chain

CSV_FILES = ("voltages.csv", "contracts.csv", "reputation.csv", "wallets.csv", "income.csv")
CONTRACT_COLUMNS = ("cfp_id", "initiator", "winner", "price", "dv_target", "dv_achieved", "status")
CNP_COLUMNS = ("step", "cfp_id", "event", "agent", "value")


def fmt(x) -> str:
    """Stable float formatting so identical runs give identical bytes."""
    if x is None or x == "":
        return ""
    if isinstance(x, float):
        return repr(round(x, 12) + 0.0)
    return str(x)


def _write(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_ledger_traces(out_dir: str | Path, reputation, wallets) -> None:
    """reputation.csv and wallets.csv; also used when rebuilding them from chain.log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "reputation.csv", ("step", "agent", "g"), reputation)
    _write(out / "wallets.csv", ("step", "agent", "balance"), wallets)


def emit_reports(report: RunReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "voltages.csv", ("step", "bus", "v_pu"), report.voltages)
    _write(out / "contracts.csv", CONTRACT_COLUMNS,
           ([r[c] for c in CONTRACT_COLUMNS] for r in report.contracts))
    write_ledger_traces(out, report.reputation, report.wallets)
    _write(out / "income.csv", ("step", "agent", "eq13_revenue"), report.income)
    _write(out / "cnp_log.csv", CNP_COLUMNS,
           ([e.get(c) for c in CNP_COLUMNS] for e in report.cnp_log))
    (out / "chain.log").write_text(serialize_chain(report.chain))
    summary = {
        "scenario": report.scenario,
        "blocks": len(report.chain),
        "contracts": len(report.contracts),
        "cycle_steps": report.cycle_steps,
        "violation_episodes": report.violation_episodes,
        "warnings": report.warnings,
        "rejected_transactions": [list(r) for r in report.rejections],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return sorted(out.iterdir())


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
