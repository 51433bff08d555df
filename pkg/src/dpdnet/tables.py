"""Published parameter / MAC figures and the check against :mod:`dpdnet.analysis`.

Expected values live in ``data/published_tables.csv`` as displayed (strings),
so the display precision of each cell is known. Table 4's ResNet50 and
PSDNet50 figures correspond to the CIFAR bottleneck widths doubled, hence
``alpha = 2.0`` on those rows.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from decimal import Decimal
from importlib import resources

from .analysis import DEFAULT_POLICY, CountingPolicy, count_network
from .arch import builtin_spec

# relative slack on top of one unit in the last displayed digit
SLACK = 0.05
# Table 4 tolerance (relative)
TABLE4_TOL = 0.10


@dataclass(frozen=True)
class ExpectedRow:
    table: int
    network: str
    builtin: str
    alpha: float
    m: int
    params_m: str
    macs_m: str


@dataclass(frozen=True)
class CellCheck:
    table: int
    network: str
    alpha: float
    m: int
    column: str
    expected: Decimal
    computed: float
    tolerance: float

    @property
    def error(self) -> float:
        return self.computed - float(self.expected)

    @property
    def passed(self) -> bool:
        return abs(self.error) <= self.tolerance + 1e-12

    @property
    def label(self) -> str:
        return f"Table {self.table} {self.network} alpha={self.alpha:g} m={self.m} {self.column}"

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.label:<52} expected {self.expected}  "
                f"computed {self.computed:.4g}  tol {self.tolerance:.3g}")


def load_expected() -> list[ExpectedRow]:
    text = resources.files("dpdnet").joinpath("data/published_tables.csv").read_text("utf-8")
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(ExpectedRow(int(rec["table"]), rec["network"], rec["builtin"],
                                float(rec["alpha"]), int(rec["m"]), rec["params_m"], rec["macs_m"]))
    return rows


def unit_of(displayed: str) -> Decimal:
    """One unit in the last displayed digit: ``'0.04' -> 0.01``, ``'316' -> 1``."""
    return Decimal(1).scaleb(Decimal(displayed).as_tuple().exponent)


def tolerance(table: int, displayed: str) -> float:
    value = float(displayed)
    if table == 4:
        return TABLE4_TOL * value
    return float(unit_of(displayed)) + SLACK * value


def verify_tables(policy: CountingPolicy = DEFAULT_POLICY, tables=(4, 5, 6)) -> list[CellCheck]:
    """Recompute every parameter / MAC cell and compare with the published value."""
    checks = []
    for row in load_expected():
        if row.table not in tables:
            continue
        report = count_network(builtin_spec(row.builtin, row.alpha, row.m), policy=policy)
        for column, displayed, computed in (
            ("params", row.params_m, report.params / 1e6),
            ("macs", row.macs_m, report.macs / 1e6),
        ):
            checks.append(CellCheck(row.table, row.network, row.alpha, row.m, column,
                                    Decimal(displayed), computed, tolerance(row.table, displayed)))
    return checks
