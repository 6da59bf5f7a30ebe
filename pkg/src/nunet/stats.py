"""Paired significance testing and comparison-table construction.

The Student t CDF is evaluated through the regularized incomplete beta
function, computed with a Lentz-style continued fraction. The default
pairing unit is the image (pooled over cross-validation predictions);
per-fold pairing is available as an alternate mode.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple

from .errors import DataError
from .metrics import METRIC_NAMES, EvalReport, format_mean_std

DEFAULT_ALPHA = 0.05

_CF_MAX_ITER = 300
_CF_EPS = 1e-15
_CF_TINY = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_cdf(t: float, dof: int) -> float:
    """CDF of the Student t distribution with `dof` degrees of freedom."""
    if dof < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {dof}")
    if t == 0.0:
        return 0.5
    x = dof / (dof + t * t)
    tail = 0.5 * betainc(dof / 2.0, 0.5, x)
    return 1.0 - tail if t > 0 else tail


def t_sf_two_sided(t: float, dof: int) -> float:
    """Two-tailed p-value for a t statistic."""
    return betainc(dof / 2.0, 0.5, dof / (dof + t * t)) if t != 0.0 else 1.0


class TTestResult(NamedTuple):
    t: float
    p: float
    dof: int
    degenerate: bool


@dataclass(frozen=True)
class PairedSeries:
    """Values of one metric for two methods, paired by sample id."""

    method_a: str
    method_b: str
    ids: tuple[str, ...]
    values_a: tuple[float, ...]
    values_b: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.ids) == len(self.values_a) == len(self.values_b)):
            raise DataError("ids and value lists must have equal length")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate sample ids in paired series")

    @classmethod
    def pair(cls, method_a: str, a: Mapping[str, float],
             method_b: str, b: Mapping[str, float]) -> "PairedSeries":
        """Pair two id -> value maps, rejecting unmatched ids."""
        only_a = sorted(set(a) - set(b))
        only_b = sorted(set(b) - set(a))
        if only_a or only_b:
            raise DataError(
                f"cannot pair {method_a!r} with {method_b!r}: unmatched ids "
                f"{only_a[:5] + only_b[:5]}"
            )
        ids = tuple(sorted(a))
        return cls(method_a, method_b, ids,
                   tuple(a[i] for i in ids), tuple(b[i] for i in ids))

    def __len__(self) -> int:
        return len(self.ids)


def paired_t_test(series: PairedSeries) -> TTestResult:
    """Two-tailed paired Student t-test on a - b.

    Uses the sample standard deviation (n - 1 divisor) and n - 1 degrees
    of freedom. All-zero differences give t = 0, p = 1; a zero standard
    deviation with nonzero mean is degenerate and reported as p = 0.
    """
    n = len(series)
    if n < 2:
        raise DataError(f"paired t-test needs n >= 2, got {n}")
    diffs = [a - b for a, b in zip(series.values_a, series.values_b)]
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    sd = math.sqrt(var)
    dof = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, p=1.0, dof=dof, degenerate=False)
        return TTestResult(t=math.copysign(math.inf, mean), p=0.0, dof=dof, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t=t, p=t_sf_two_sided(t, dof), dof=dof, degenerate=False)


@dataclass
class ComparisonCell:
    mean: float
    std: float
    significant: bool
    p: float | None
    best: bool = False


@dataclass
class ComparisonTable:
    methods: list[str]
    cells: dict[str, dict[str, ComparisonCell]]  # method -> metric -> cell
    reference: str | None
    alpha: float
    pairing: str
    header_comment: str = ""

    def to_csv(self) -> str:
        out = io.StringIO()
        if self.header_comment:
            out.write(f"# {self.header_comment}\n")
        cols = ["method"]
        for name in METRIC_NAMES:
            cols += [f"{name}_mean", f"{name}_std", f"{name}_p", f"{name}_significant"]
        out.write(",".join(cols) + "\n")
        for method in self.methods:
            row = [method]
            for name in METRIC_NAMES:
                cell = self.cells[method][name]
                row += [f"{cell.mean:.6f}", f"{cell.std:.6f}",
                        "" if cell.p is None else f"{cell.p:.6g}",
                        str(int(cell.significant))]
            out.write(",".join(row) + "\n")
        return out.getvalue()

    def to_markdown(self) -> str:
        lines = []
        if self.header_comment:
            lines.append(f"<!-- {self.header_comment} -->")
        title = [m.capitalize() for m in METRIC_NAMES]
        lines.append("| Method | " + " | ".join(title) + " |")
        lines.append("|" + "---|" * (len(METRIC_NAMES) + 1))
        for method in self.methods:
            parts = [method]
            for name in METRIC_NAMES:
                cell = self.cells[method][name]
                text = format_mean_std(cell.mean, cell.std)
                if cell.significant:
                    text += " *"
                if cell.best:
                    text = f"**{text}**"
                parts.append(text)
            lines.append("| " + " | ".join(parts) + " |")
        if self.reference is not None:
            lines.append("")
            lines.append(f"significance: paired t-test vs {self.reference}, per-{self.pairing} "
                         f"pairing, * marks p < {self.alpha}; best value per column in bold.")
        return "\n".join(lines) + "\n"


def _metric_by_id(report: EvalReport, metric: str) -> dict[str, float]:
    return {r.id: getattr(r, metric) for r in report.records}


def _metric_by_fold(report: EvalReport, metric: str) -> dict[str, float]:
    return {str(fold): means[metric] for fold, means in report.summary.fold_means.items()}


def build_comparison_table(reports: list[EvalReport], reference_method: str | None = None,
                           alpha: float = DEFAULT_ALPHA, pairing: str = "image",
                           header_comment: str = "") -> ComparisonTable:
    """Rows = methods, columns = the five metrics as mean +- std.

    Cells of non-reference methods get an asterisk when the paired test
    against the reference yields p < alpha. All reports must share one
    fold plan, otherwise pairing is impossible.
    """
    if not reports:
        raise DataError("no reports to compare")
    if pairing not in ("image", "fold"):
        raise DataError(f"pairing must be 'image' or 'fold', got {pairing!r}")
    names = [r.method for r in reports]
    if len(set(names)) != len(names):
        raise DataError(f"duplicate method names in reports: {names}")
    plans = {r.fold_plan_fingerprint for r in reports}
    if len(reports) > 1 and len(plans) != 1:
        raise DataError(f"reports were produced under different fold plans: {sorted(plans)}")

    reference = None
    if len(reports) > 1:
        if reference_method is None:
            reference_method = names[-1]
        if reference_method not in names:
            raise DataError(f"reference method {reference_method!r} not among {names}")
        reference = next(r for r in reports if r.method == reference_method)

    extract = _metric_by_id if pairing == "image" else _metric_by_fold
    cells: dict[str, dict[str, ComparisonCell]] = {}
    for report in reports:
        summary = report.summary
        row = {}
        for metric in METRIC_NAMES:
            mean, std = summary.by_fold[metric]
            p = None
            significant = False
            if reference is not None and report.method != reference.method:
                series = PairedSeries.pair(report.method, extract(report, metric),
                                           reference.method, extract(reference, metric))
                result = paired_t_test(series)
                p = result.p
                significant = p < alpha
            row[metric] = ComparisonCell(mean=mean, std=std, significant=significant, p=p)
        cells[report.method] = row
    for metric in METRIC_NAMES:
        best = max(names, key=lambda m: cells[m][metric].mean)
        cells[best][metric].best = True
    return ComparisonTable(methods=names, cells=cells, reference=reference_method
                           if reference is not None else None,
                           alpha=alpha, pairing=pairing, header_comment=header_comment)
