"""Correlation metrics and the grouped evaluation report."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateDataError


def _as_vec(x, name):
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ContractError(f"{name} contains non-finite values")
    return v


def plcc(x, y) -> float:
    """Pearson linear correlation coefficient."""
    a = _as_vec(x, "x")
    b = _as_vec(y, "y")
    if a.size != b.size:
        raise ContractError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 3:
        raise ContractError(f"need at least 3 points, got {a.size}")
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.sum(a * a) * np.sum(b * b))
    if denom <= 0.0:
        raise DegenerateDataError("zero variance input to plcc")
    return float(np.sum(a * b) / denom)


def _average_ranks(v: np.ndarray) -> np.ndarray:
    """1-based ranks; ties receive the average of their positions."""
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srocc(x, y) -> float:
    """Spearman rank-order correlation: Pearson on average ranks."""
    a = _as_vec(x, "x")
    b = _as_vec(y, "y")
    if a.size != b.size:
        raise ContractError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 3:
        raise ContractError(f"need at least 3 points, got {a.size}")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise DegenerateDataError("all-equal vector has no rank order")
    return plcc(_average_ranks(a), _average_ranks(b))


def rmse(pred, target) -> float:
    """Root mean squared error over all entries (flattened)."""
    p = _as_vec(pred, "pred")
    t = _as_vec(target, "target")
    if p.size != t.size:
        raise ContractError(f"length mismatch: {p.size} vs {t.size}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass
class GroupMetrics:
    group: str
    n: int
    plcc: float | None
    srocc: float | None
    rmse: float


@dataclass
class EvalReport:
    """Per-group metrics for one evaluation run."""

    run_index: int
    rows: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def row(self, group: str) -> GroupMetrics:
        for r in self.rows:
            if r.group == group:
                return r
        raise KeyError(group)


def _metrics_for(group, preds, targets):
    n = len(preds)
    r = rmse(preds, targets)
    try:
        p = plcc(preds, targets)
    except DegenerateDataError:
        p = None
    try:
        s = srocc(preds, targets)
    except DegenerateDataError:
        s = None
    return GroupMetrics(group=group, n=n, plcc=p, srocc=s, rmse=r)


def evaluate_predictions(run_index, samples, predictions) -> EvalReport:
    """Group metrics for aligned (sample, prediction) sequences: overall,
    per distortion tag, and symmetric vs asymmetric."""
    if len(samples) != len(predictions):
        raise ContractError("samples and predictions differ in length")
    report = EvalReport(run_index=run_index)

    groups = {"ALL": list(range(len(samples)))}
    for i, s in enumerate(samples):
        groups.setdefault(s.distortion, []).append(i)
        groups.setdefault(s.symmetry, []).append(i)

    order = ["ALL"]
    order += sorted(g for g in groups if g not in ("ALL", "symmetric", "asymmetric"))
    order += [g for g in ("symmetric", "asymmetric") if g in groups]

    for group in order:
        idx = groups[group]
        if len(idx) < 3:
            report.warnings.append(
                f"group {group!r} skipped: only {len(idx)} samples")
            continue
        preds = [predictions[i] for i in idx]
        targets = [samples[i].dmos for i in idx]
        report.rows.append(_metrics_for(group, preds, targets))
    return report


def evaluate_run(params, manifest, data, run_index=None) -> EvalReport:
    """Predict every test-split sample of one run and compute group metrics."""
    from .training import predict_image

    test = [d for d in data if manifest.role_of(d.sample.ref_id) == "test"]
    if not test:
        raise ContractError(f"run {manifest.run_index}: empty test split")
    preds = [predict_image(params, d.left, d.right) for d in test]
    return evaluate_predictions(
        manifest.run_index if run_index is None else run_index,
        [d.sample for d in test], preds)


def aggregate_reports(reports):
    """Mean metrics per group across runs; groups missing a metric in some
    run average over the runs that have it."""
    acc = {}
    order = []
    for report in reports:
        for row in report.rows:
            if row.group not in acc:
                acc[row.group] = {"n": [], "plcc": [], "srocc": [], "rmse": []}
                order.append(row.group)
            acc[row.group]["n"].append(row.n)
            if row.plcc is not None:
                acc[row.group]["plcc"].append(row.plcc)
            if row.srocc is not None:
                acc[row.group]["srocc"].append(row.srocc)
            acc[row.group]["rmse"].append(row.rmse)

    out = []
    for group in order:
        vals = acc[group]
        out.append(GroupMetrics(
            group=group,
            n=int(np.sum(vals["n"])),
            plcc=float(np.mean(vals["plcc"])) if vals["plcc"] else None,
            srocc=float(np.mean(vals["srocc"])) if vals["srocc"] else None,
            rmse=float(np.mean(vals["rmse"])),
        ))
    return out


REPORT_COLUMNS = ("run", "group", "n", "plcc", "srocc", "rmse")


def write_report_csv(path, reports) -> None:
    def fmt(v):
        return "nan" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v))

    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for report in reports:
            for row in report.rows:
                fh.write(",".join([str(report.run_index), row.group, str(row.n),
                                   fmt(row.plcc), fmt(row.srocc), fmt(row.rmse)])
                         + "\n")


def format_report_table(rows, title="evaluation") -> str:
    lines = [title]
    lines.append(f"{'group':<14} {'n':>6} {'plcc':>9} {'srocc':>9} {'rmse':>10}")

    def fmt(v):
        return "   undef" if v is None else f"{v:8.4f}"

    for row in rows:
        lines.append(f"{row.group:<14} {row.n:>6} {fmt(row.plcc):>9} "
                     f"{fmt(row.srocc):>9} {row.rmse:>10.4f}")
    return "\n".join(lines)
