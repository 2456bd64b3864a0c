"""KS tests, balanced accuracy and plain-vs-enhanced summary tables."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy.special import kolmogorov

from .features import DISPLAY_NAMES

log = logging.getLogger(__name__)

SMALL_SAMPLE = 20
REPORT_COLUMNS = ("feature", "mean-plain", "mean-enhanced", "p-value")
COMBINED = "combined"
SINGLE_RANDOM = "single random"

ROW_LABELS = dict(DISPLAY_NAMES, combined="combined features")


class KSResult(NamedTuple):
    statistic: float
    p_value: float
    n1: int
    n2: int


def ks_statistic(a, b) -> float:
    """sup |ECDF_a - ECDF_b| evaluated at every pooled sample point."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / a.size
    fb = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_two_sample(a, b, warn_small: bool = True) -> KSResult:
    """Two-sided two-sample KS test with the asymptotic Kolmogorov p-value.

    The p-value is ``Q(sqrt(n m / (n + m)) * D)`` with
    ``Q(t) = 2 sum_k (-1)^(k-1) exp(-2 k^2 t^2)``.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("KS test needs two nonempty samples")
    if warn_small and min(a.size, b.size) < SMALL_SAMPLE:
        log.warning("KS p-value is asymptotic; samples of size %d and %d are small",
                    a.size, b.size)
    d = ks_statistic(a, b)
    en = a.size * b.size / (a.size + b.size)
    p = float(np.clip(kolmogorov(np.sqrt(en) * d), 0.0, 1.0))
    return KSResult(d, p, a.size, b.size)


def balanced_accuracy(predictions, labels) -> float:
    pred = np.asarray(predictions).astype(int).ravel()
    lab = np.asarray(labels).astype(int).ravel()
    if pred.shape != lab.shape:
        raise ValueError("predictions and labels differ in length")
    classes = np.unique(lab)
    if classes.size < 2:
        raise ValueError("balanced accuracy needs both classes in the labels")
    return float(np.mean([np.mean(pred[lab == c] == c) for c in classes]))


# ---------------------------------------------------------------- score tables

@dataclass
class ScoreSample:
    model_tag: str
    feature_tag: str
    s: np.ndarray
    f: np.ndarray | None = None

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        if self.f is not None:
            self.f = np.asarray(self.f, dtype=np.float64)
        for name, v in (("S", self.s), ("F", self.f)):
            if v is None:
                continue
            ok = v[np.isfinite(v)]
            if np.any((ok < 0) | (ok > 1)):
                raise ValueError(f"{self.feature_tag}: {name} values outside [0, 1]")

    @property
    def n(self) -> int:
        return int(self.s.size)

    def values(self, measure: str) -> np.ndarray:
        v = self.s if measure == "S" else self.f
        if v is None:
            raise ValueError(f"no {measure} values for {self.feature_tag}")
        return v[np.isfinite(v)]


@dataclass
class ReportRow:
    feature: str
    mean_plain: float
    mean_enhanced: float | None = None
    p_value: float | None = None
    baseline: bool = False


@dataclass
class ReportTable:
    measure: str
    rows: list[ReportRow] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _is_baseline(tag: str) -> bool:
    return tag.endswith(" random")


def summarize(plain: Mapping[str, ScoreSample], enhanced: Mapping[str, ScoreSample] | None = None,
              measure: str = "S") -> ReportTable:
    """One row per feature tag: plain mean, enhanced mean, plain-vs-enhanced KS p.

    Baseline rows (tags ending in " random") follow the feature rows.
    """
    if enhanced is not None and set(plain) != set(enhanced):
        raise ValueError(f"feature tags differ: {sorted(set(plain) ^ set(enhanced))}")
    table = ReportTable(measure)
    if enhanced is None:
        table.warnings.append("no enhanced scores supplied; plain-only report")
    tags = [t for t in plain if not _is_baseline(t)] + [t for t in plain if _is_baseline(t)]
    small = False
    for tag in tags:
        pv = plain[tag].values(measure)
        row = ReportRow(ROW_LABELS.get(tag, tag), float(np.mean(pv)) if pv.size else float("nan"),
                        baseline=_is_baseline(tag))
        if enhanced is not None:
            ev = enhanced[tag].values(measure)
            row.mean_enhanced = float(np.mean(ev)) if ev.size else float("nan")
            if pv.size and ev.size:
                row.p_value = ks_two_sample(pv, ev, warn_small=False).p_value
                if min(pv.size, ev.size) < SMALL_SAMPLE and not small:
                    small = True
                    table.warnings.append(f"fewer than {SMALL_SAMPLE} samples per group; "
                                          "asymptotic KS p-values are rough")
        table.rows.append(row)
    return table


def sci(x: float | None) -> str:
    """Two significant digits with a compact exponent, e.g. ``8.2e-4``."""
    if x is None:
        return "-"
    if not np.isfinite(x):
        return "nan"
    mant, exp = f"{x:.1e}".split("e")
    return f"{mant}e{int(exp)}"


def render_text(table: ReportTable) -> str:
    header = ("feature", f"mean {table.measure} plain", f"mean {table.measure} enhanced", "p-value")
    body = [(r.feature, sci(r.mean_plain), sci(r.mean_enhanced), sci(r.p_value)) for r in table.rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    lines = [f"Results of {'Pointwise' if table.measure == 'S' else 'Gradient Flow'} "
             f"Alignment ({table.measure})"]

    def fmt(cells):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))

    lines.append(fmt(header))
    lines.append("  ".join("-" * w for w in widths))
    sep_done = False
    for row, cells in zip(table.rows, body):
        if row.baseline and not sep_done:
            lines.append("  ".join("-" * w for w in widths))
            sep_done = True
        lines.append(fmt(cells))
    for w in table.warnings:
        lines.append(f"warning: {w}")
    return "\n".join(lines) + "\n"


def render_csv(table: ReportTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in table.rows:
        writer.writerow([r.feature, repr(r.mean_plain),
                         "" if r.mean_enhanced is None else repr(r.mean_enhanced),
                         "" if r.p_value is None else repr(r.p_value)])
    return buf.getvalue()


# ---------------------------------------------------------------- score records

def write_records(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_records(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def samples_from_records(records: Sequence[dict], model_tag: str) -> dict[str, ScoreSample]:
    """Group per-sample records (``{"S": {tag: v}, "F": {tag: v}}``) by feature tag."""
    tags: list[str] = []
    for rec in records:
        for t in rec.get("S", {}):
            if t not in tags:
                tags.append(t)
    out = {}
    for t in tags:
        s = [rec["S"].get(t) for rec in records]
        s = np.array([np.nan if v is None else v for v in s], dtype=np.float64)
        f = None
        if any("F" in rec for rec in records):
            f = np.array([np.nan if rec.get("F", {}).get(t) is None else rec["F"][t]
                          for rec in records], dtype=np.float64)
        out[t] = ScoreSample(model_tag, t, s, f)
    return out
