"""Accuracy, ROC/AUC, paired t-tests and multi-run summaries."""

from __future__ import annotations

import json
import math
import sys
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .classifier import PatchProbability, PatientPrediction
from .datasets import Label
from .errors import DomainError, PairingError

METRICS = ("A_patch", "A_patient", "auc_patch", "auc_patient")


def _label_int(x) -> int:
    return int(Label(x)) if not isinstance(x, str) else int(Label.parse(x))


def patch_accuracy(predictions: Sequence[float], labels: Sequence, t: float = 0.5) -> float:
    """Fraction of patches whose thresholded ``p_msi`` matches the inherited label."""
    if len(predictions) == 0:
        raise DomainError("no patches to score")
    if len(predictions) != len(labels):
        raise PairingError("predictions and labels differ in length")
    hard = [Label.MSI if p >= t else Label.MSS for p in predictions]
    return sum(h == _label_int(l) for h, l in zip(hard, labels)) / len(hard)


def patient_accuracy(predictions: Sequence, labels: Sequence) -> float:
    """``predictions`` are Labels or :class:`PatientPrediction` objects."""
    if len(predictions) == 0:
        raise DomainError("no patients to score")
    if len(predictions) != len(labels):
        raise PairingError("predictions and labels differ in length")
    hard = [p.C_W if isinstance(p, PatientPrediction) else Label(p) for p in predictions]
    return sum(h == _label_int(l) for h, l in zip(hard, labels)) / len(hard)


def roc_curve(scores: Sequence[float], labels: Sequence) -> list[tuple[float, float, float]]:
    """``(fpr, tpr, threshold)`` for every distinct score, highest threshold first.

    A unit counts as positive when ``score >= threshold``; the curve starts at
    ``(0, 0, inf)`` and ends at ``(1, 1, min score)``.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray([_label_int(l) for l in labels])
    n_pos, n_neg = int(y.sum()), int(len(y) - y.sum())
    if n_pos == 0 or n_neg == 0:
        raise DomainError("ROC needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    points = [(0.0, 0.0, math.inf)]
    points += [(fp[i] / n_neg, tp[i] / n_pos, float(s[i])) for i in last]
    return [(float(a), float(b), c) for a, b, c in points]


def auc_mann_whitney(scores: Sequence[float], labels: Sequence) -> float:
    """Probability that a random MSI unit outscores a random MSS unit, ties counted 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray([_label_int(l) for l in labels])
    n_pos, n_neg = int(y.sum()), int(len(y) - y.sum())
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUC needs both classes present")
    # midranks
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1
        i = j + 1
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def roc_auc(scores: Sequence[float], labels: Sequence) -> tuple[list[tuple[float, float, float]], float]:
    return roc_curve(scores, labels), auc_mann_whitney(scores, labels)


def trapezoid_auc(points: Sequence[tuple[float, float, float]]) -> float:
    area = 0.0
    for (x0, y0, _), (x1, y1, _) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2
    return area


# --------------------------------------------------------------------------
# Student t distribution via the regularised incomplete beta function


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-16) -> float:
    # modified Lentz evaluation of the continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    return h


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta ``I_x(a, b)``."""
    if not 0.0 <= x <= 1.0:
        raise DomainError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """``P(|T| >= |t|)`` for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def t_cdf(t: float, df: float) -> float:
    tail = 0.5 * t_sf_two_sided(t, df)
    return 1.0 - tail if t > 0 else tail


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int
    mean_diff: float
    degenerate: str | None = None  # "infinite_t" or "undefined" when the differences have zero variance


# Two-pass mean and variance in exact rational arithmetic, rounded once at the end.
def _exact_mean(xs: Sequence[float]) -> Fraction:
    return sum(map(Fraction, xs), Fraction(0)) / len(xs)


def _mean(xs: Sequence[float]) -> float:
    if not all(map(math.isfinite, xs)):
        return math.fsum(xs) / len(xs)  # nan or inf propagate as usual
    return float(_exact_mean(xs))


def _sample_std(xs: Sequence[float]) -> float:
    if not all(map(math.isfinite, xs)):
        return math.nan
    m = _exact_mean(xs)
    return math.sqrt(sum(((Fraction(x) - m) ** 2 for x in xs), Fraction(0)) / (len(xs) - 1))


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    if len(a) != len(b):
        raise PairingError(f"paired samples differ in length ({len(a)} vs {len(b)})")
    n = len(a)
    if n < 2:
        raise DomainError("paired t-test needs at least two pairs")
    d = [float(x) - float(y) for x, y in zip(a, b)]
    mean = _mean(d)
    sd = _sample_std(d)
    df = n - 1
    # rounding noise from forming a - b is not treated as real variance
    if sd <= 8 * sys.float_info.epsilon * max(abs(x) for x in d):
        if mean == 0.0:
            return TTestResult(math.nan, math.nan, df, mean, "undefined")
        return TTestResult(math.copysign(math.inf, mean), 0.0, df, mean, "infinite_t")
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, t_sf_two_sided(t, df), df, mean)


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    A_patch: float
    A_patient: float
    auc_patch: float
    auc_patient: float
    n_patients: int
    n_patches: int
    run_seed: int
    method: str = ""
    roc_patch: list = field(default_factory=list)
    roc_patient: list = field(default_factory=list)
    A_group: float | None = None
    balanced: bool = False

    def metrics(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}

    def to_json(self) -> str:
        d = asdict(self)
        # inf threshold at the ROC origin is not valid JSON
        for key in ("roc_patch", "roc_patient"):
            d[key] = [[f, t, None if math.isinf(th) else th] for f, t, th in d[key]]
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        for key in ("roc_patch", "roc_patient"):
            d[key] = [(f, t, math.inf if th is None else th) for f, t, th in d[key]]
        return cls(**d)

    def save(self, path) -> Path:
        Path(path).write_text(self.to_json() + "\n")
        return Path(path)

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(Path(path).read_text())


def evaluate(
    patch_probs: Sequence[PatchProbability],
    patient_preds: Sequence[PatientPrediction],
    patch_labels: Mapping[str, Label],
    patient_labels: Mapping[str, Label],
    run_seed: int = 0,
    t: float = 0.5,
    method: str = "",
    group_accuracy: float | None = None,
) -> EvalReport:
    """Build an :class:`EvalReport`; patient ROC uses ``P_W``, patch ROC uses ``p_msi``."""
    ps = [p.p_msi for p in patch_probs]
    pl = [patch_labels[p.patch_id] for p in patch_probs]
    ql = [patient_labels[p.patient_id] for p in patient_preds]
    roc_patch, auc_patch = roc_auc(ps, pl)
    roc_patient, auc_patient = roc_auc([p.P_W for p in patient_preds], ql)
    return EvalReport(
        A_patch=patch_accuracy(ps, pl, t),
        A_patient=patient_accuracy(list(patient_preds), ql),
        auc_patch=auc_patch,
        auc_patient=auc_patient,
        n_patients=len(patient_preds),
        n_patches=len(patch_probs),
        run_seed=run_seed,
        method=method,
        roc_patch=roc_patch,
        roc_patient=roc_patient,
        A_group=group_accuracy,
    )


@dataclass
class MultiRunSummary:
    n_runs: int
    seeds: list[int]
    stats: dict[str, dict[str, tuple[float, float | None]]]
    tests: dict[str, TTestResult] = field(default_factory=dict)
    comparator: str | None = None

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True, default=str)

    def table(self, metrics: Sequence[str] = METRICS) -> str:
        """Plain-text comparison table: mean ± std per method, then paired tests."""
        names = list(self.stats)
        width = max(12, *(len(n) for n in names))
        lines = [f"{'method':<{width}}  " + "  ".join(f"{m:>17}" for m in metrics)]
        for name in names:
            cells = []
            for m in metrics:
                mean, sd = self.stats[name][m]
                cells.append(f"{mean:.3f}" + (f" ± {sd:.3f}" if sd is not None else "        "))
            lines.append(f"{name:<{width}}  " + "  ".join(f"{c:>17}" for c in cells))
        if self.tests:
            lines.append("")
            lines.append(f"paired t-test ({names[0]} - {names[1]}, n={self.n_runs}, df={self.n_runs - 1})")
            for m, r in self.tests.items():
                flag = f"  [{r.degenerate}]" if r.degenerate else ""
                lines.append(f"  {m:<12} t = {r.t:8.3f}  p = {r.p:.3g}{flag}")
        return "\n".join(lines)


def _by_seed(reports: Sequence[EvalReport]) -> dict[int, EvalReport]:
    out = {}
    for r in reports:
        if r.run_seed in out:
            raise PairingError(f"duplicate run seed {r.run_seed}")
        out[r.run_seed] = r
    return out


def summarize_runs(
    reports: Mapping[str, Sequence[EvalReport]] | Sequence[EvalReport], metrics: Iterable[str] = METRICS
) -> MultiRunSummary:
    """Mean and sample std per metric for each method, plus paired t-tests
    between the first two methods (paired by ``run_seed``).

    With a single run the std is reported as ``None`` and no test is run.
    """
    if not isinstance(reports, Mapping):
        reports = {"runs": list(reports)}
    metrics = list(metrics)
    keyed = {name: _by_seed(rs) for name, rs in reports.items()}
    seed_sets = [set(k) for k in keyed.values()]
    if any(s != seed_sets[0] for s in seed_sets):
        raise PairingError("methods were not run on the same seed schedule: " + str([sorted(s) for s in seed_sets]))
    seeds = sorted(seed_sets[0])
    n = len(seeds)
    if n == 0:
        raise DomainError("no runs to summarise")
    if n < 2:
        warnings.warn("single run per method: standard deviation omitted", stacklevel=2)

    stats = {}
    for name, by_seed in keyed.items():
        stats[name] = {}
        for m in metrics:
            xs = [getattr(by_seed[s], m) for s in seeds]
            stats[name][m] = (_mean(xs), _sample_std(xs) if n >= 2 else None)
    tests = {}
    names = list(keyed)
    if len(names) >= 2 and n >= 2:
        a, b = keyed[names[0]], keyed[names[1]]
        for m in metrics:
            tests[m] = paired_t_test([getattr(a[s], m) for s in seeds], [getattr(b[s], m) for s in seeds])
    return MultiRunSummary(n, seeds, stats, tests, names[1] if len(names) >= 2 else None)
