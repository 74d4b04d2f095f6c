"""Experiment reports: named tables, verdicts, CSV and SVG emission."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

__all__ = ["Table", "Verdict", "ExperimentReport", "write_report", "read_table", "ReportError"]


class ReportError(OSError):
    pass


@dataclass
class Table:
    columns: tuple
    rows: list = field(default_factory=list)

    def add(self, *values):
        if len(values) != len(self.columns):
            raise ValueError(f"row has {len(values)} values, table has {len(self.columns)} columns")
        self.rows.append(tuple(values))

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def records(self) -> list:
        return [dict(zip(self.columns, r)) for r in self.rows]


@dataclass(frozen=True)
class Verdict:
    property: str
    tolerance: str
    observed: float
    passed: bool


@dataclass
class ExperimentReport:
    """Tables plus verdicts derived from them.

    ``plot`` is ``(table, x, y, group)`` for the SVG view, or None.
    """

    experiment_id: str
    tables: dict
    verdicts: list
    config_hash: str
    seeds: tuple
    seed: int = 0
    plot: tuple | None = None
    labels: tuple = ("", "")

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def verdict_table(self) -> Table:
        t = Table(("property", "tolerance", "observed", "passed"))
        for v in self.verdicts:
            t.add(v.property, v.tolerance, float(v.observed), int(v.passed))
        return t


def _cell(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str):
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def _write_csv(table: Table, path: Path, comment: str | None = None) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(table.columns)
            for row in table.rows:
                w.writerow([_cell(v) for v in row])
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc.strerror}") from None


def read_table(path) -> Table:
    """Load a CSV written by :func:`write_report`; floats round-trip exactly."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        raise ReportError(f"{path}: no header")
    t = Table(tuple(rows[0]))
    for r in rows[1:]:
        t.add(*(_parse(x) for x in r))
    return t


def _paths(base: Path, report: ExperimentReport) -> dict:
    stem = base.with_suffix("")
    out = {}
    for name in report.tables:
        out[name] = base if name == "main" else stem.parent / f"{stem.name}_{name}.csv"
    out["verdicts"] = stem.parent / f"{stem.name}_verdicts.csv"
    return out


def write_report(report: ExperimentReport, path, format: str = "csv") -> list:
    """Write ``report`` and return the files produced.

    CSV: the main table at ``path``, every other table next to it as
    ``<stem>_<name>.csv``, verdicts as ``<stem>_verdicts.csv`` with a
    provenance comment line.  SVG: a single figure at ``path``.
    """
    path = Path(path)
    parent = path.parent
    if not parent.is_dir():
        raise ReportError(f"output directory {parent} does not exist")
    if not os.access(parent, os.W_OK):
        raise ReportError(f"output directory {parent} is not writable")
    if format == "csv":
        files = _paths(path.with_suffix(".csv"), report)
        for name, table in report.tables.items():
            _write_csv(table, files[name])
        prov = f"experiment={report.experiment_id}; config_hash={report.config_hash}; seed={report.seed}; seeds={' '.join(map(str, report.seeds))}"
        _write_csv(report.verdict_table(), files["verdicts"], prov)
        return list(files.values())
    if format == "svg":
        _write_svg(report, path.with_suffix(".svg"))
        return [path.with_suffix(".svg")]
    raise ValueError(f"unknown report format {format!r}")


def _write_svg(report: ExperimentReport, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = report.config_hash
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    if report.plot is not None:
        tname, x, y, group = report.plot
        table = report.tables[tname]
        series: dict = {}
        for rec in table.records():
            key = rec[group] if group else ""
            series.setdefault(key, ([], []))
            series[key][0].append(rec[x])
            series[key][1].append(rec[y])
        for key, (xs, ys) in series.items():
            finite = [(a, b) for a, b in zip(xs, ys) if isinstance(b, (int, float)) and math.isfinite(b)]
            if finite:
                ax.plot(*zip(*finite), marker=".", label=str(key) if group else None)
        if group and series:
            ax.legend(fontsize=7)
        ax.set_xlabel(report.labels[0] or x)
        ax.set_ylabel(report.labels[1] or y)
    ax.set_title(f"{report.experiment_id}  config {report.config_hash}", fontsize=9)
    fig.tight_layout()
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc.strerror}") from None
    finally:
        plt.close(fig)
