"""Robustness evaluation against the sealed oracle.

The evaluation protocol: out of M test inputs, keep the T the teacher
classifies correctly (it makes no sense to attack an input the victim
already gets wrong), craft adversarial examples for those T, and count
the Q that the teacher then misclassifies. The attack success rate is
the exact ratio Q/T, rendered to four decimals for display.

All teacher access goes through the sealed handle, so one evaluation run
costs exactly M + T queries — tests assert this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .attacks import AdversarialBatch, AttackConfig, run_attack
from .datasets import LabeledDataset
from .errors import ConfigurationError, DataError, EvaluationError, FitError
from .student import StudentModel

RESULT_COLUMNS = ("run_id", "algorithm", "eps", "alpha", "steps", "student_arch",
                  "dataset_fraction", "blind", "M", "T", "Q", "p")


@dataclass(frozen=True)
class AttackReport:
    """Counts and success rate for one transfer evaluation."""

    m_total: int
    t_correct: int
    q_fooled: int
    success_rate: Fraction
    blind: bool = False

    def __post_init__(self):
        if not (0 <= self.q_fooled <= self.t_correct <= self.m_total):
            raise DataError(
                f"inconsistent counts: Q={self.q_fooled}, T={self.t_correct}, M={self.m_total}"
            )
        if self.success_rate != Fraction(self.q_fooled, self.t_correct):
            raise DataError("success_rate must equal q_fooled/t_correct exactly")

    @classmethod
    def from_counts(cls, m_total, t_correct, q_fooled, blind=False):
        if t_correct == 0:
            raise EvaluationError("no teacher-correct inputs: nothing to attack")
        return cls(int(m_total), int(t_correct), int(q_fooled),
                   Fraction(int(q_fooled), int(t_correct)), bool(blind))

    @property
    def success_rate_str(self):
        return f"{float(self.success_rate):.4f}"


@dataclass
class Selection:
    """Teacher-correct subset of a ground-truth test set, with (M, T) counts."""

    dataset: LabeledDataset
    m_total: int
    t_correct: int


def select_correct(oracle, test: LabeledDataset) -> Selection:
    """Keep only the test items the oracle classifies to their stored label."""
    if len(test) == 0:
        raise DataError("empty test set")
    images, labels = test.materialize()
    predicted = np.asarray(oracle.query_top1(images), dtype=np.int64)
    keep = np.flatnonzero(predicted == labels)
    if keep.size == 0:
        raise EvaluationError("teacher got every test input wrong: nothing to attack")
    return Selection(test.subset(keep.tolist()), m_total=len(test), t_correct=int(keep.size))


def transfer_evaluate(oracle, adv: AdversarialBatch, true_labels,
                      m_total=None, blind=False) -> AttackReport:
    """Feed adversarial examples to the teacher and count misclassifications."""
    true_labels = np.asarray(true_labels, dtype=np.int64)
    if len(true_labels) != len(adv):
        raise DataError(
            f"label count {len(true_labels)} does not match batch size {len(adv)}"
        )
    predicted = np.asarray(oracle.query_top1(adv.images), dtype=np.int64)
    q = int((predicted != true_labels).sum())
    t = len(adv)
    return AttackReport.from_counts(t if m_total is None else m_total, t, q, blind=blind)


def evaluate_attack(model: StudentModel, oracle, test: LabeledDataset,
                    config: AttackConfig, blind=False):
    """Full evaluation run: select, craft on the student, transfer to the teacher.

    Returns (report, adversarial_batch, selection). Costs exactly
    selection.m_total + selection.t_correct oracle queries.
    """
    selection = select_correct(oracle, test)
    images, labels = selection.dataset.materialize()
    adv = run_attack(model, images, labels, config)
    report = transfer_evaluate(oracle, adv, labels, m_total=selection.m_total, blind=blind)
    return report, adv, selection


def blind_attack(pretrained_student: StudentModel, oracle, test: LabeledDataset,
                 config: AttackConfig):
    """Evaluation with a student that never saw oracle-labeled data."""
    if pretrained_student.training_provenance.startswith("oracle:"):
        raise ConfigurationError(
            "blind attack requires a student with zero teaching-set exposure, "
            f"got provenance {pretrained_student.training_provenance!r}"
        )
    return evaluate_attack(pretrained_student, oracle, test, config, blind=True)


@dataclass(frozen=True)
class TrendFit:
    """Least-squares fit of y = a*ln(b + x) + c."""

    a: float
    b: float
    c: float
    rss: float

    def predict(self, x):
        return self.a * np.log(self.b + np.asarray(x, dtype=float)) + self.c


def _solve_ac(xs, ys, b):
    u = np.log(b + xs)
    design = np.stack([u, np.ones_like(u)], axis=1)
    coef, _, _, _ = np.linalg.lstsq(design, ys, rcond=None)
    resid = ys - design @ coef
    return float(coef[0]), float(coef[1]), float(resid @ resid)


def fit_log_trend(points) -> TrendFit:
    """Fit y = a*ln(b+x) + c by scanning b on a log grid, then refining.

    For each candidate b the optimal (a, c) solve in closed form; the best
    grid cell is refined by golden-section search on log(b). Deterministic.
    """
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < 4:
        raise FitError(f"need at least 4 points, got {len(pts)}")
    xs = np.array([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])
    if (xs < 0).any():
        raise FitError("x values must be non-negative")
    if np.ptp(xs) == 0:
        raise FitError("degenerate fit: all x values are equal")

    grid = np.logspace(-3, 4, 141)
    losses = [_solve_ac(xs, ys, b)[2] for b in grid]
    best = int(np.argmin(losses))
    lo = math.log(grid[max(best - 1, 0)])
    hi = math.log(grid[min(best + 1, len(grid) - 1)])

    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    c_, d_ = hi - inv_phi * (hi - lo), lo + inv_phi * (hi - lo)
    fc = _solve_ac(xs, ys, math.exp(c_))[2]
    fd = _solve_ac(xs, ys, math.exp(d_))[2]
    for _ in range(80):
        if fc < fd:
            hi, d_, fd = d_, c_, fc
            c_ = hi - inv_phi * (hi - lo)
            fc = _solve_ac(xs, ys, math.exp(c_))[2]
        else:
            lo, c_, fc = c_, d_, fd
            d_ = lo + inv_phi * (hi - lo)
            fd = _solve_ac(xs, ys, math.exp(d_))[2]
    b = math.exp((lo + hi) / 2.0)
    a, c, rss = _solve_ac(xs, ys, b)
    if not (b > -xs.min()):
        raise FitError("fit produced a non-positive log argument")
    return TrendFit(a, b, c, rss)


def result_row(run_id, algorithm, eps_label, alpha, steps, student_arch,
               fraction, report: AttackReport):
    """One results-CSV row; p is always recomputable from the Q and T columns."""
    return (
        str(run_id), str(algorithm), str(eps_label), f"{alpha:.8g}", str(steps),
        str(student_arch), f"{fraction:g}", "true" if report.blind else "false",
        str(report.m_total), str(report.t_correct), str(report.q_fooled),
        report.success_rate_str,
    )


def write_results_csv(rows, path):
    import csv
    import os

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        writer.writerows(rows)


def read_results_csv(path):
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise DataError(f"{path}: unexpected results schema {reader.fieldnames}")
        return list(reader)
