"""ROC/AUC, repeated stratified k-fold cross-validation and paired tests."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import stats

from .errors import ConfigError, DegenerateTestError, DVoxError, StratificationError, UndefinedMetricError
from .tensor import Rng

ALPHA = 0.05


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties counting 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if np.isnan(scores).any():
        raise ValueError("NaN score")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC/AUC needs both classes present")
    ranks = stats.rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class CvPlan:
    k: int = 3
    repeats: int = 3
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.k < 2 or self.repeats < 1:
            raise ConfigError("CV needs k >= 2 and repeats >= 1")


def make_folds(labels, plan: CvPlan) -> list[list[np.ndarray]]:
    """Per repeat, k disjoint sorted index arrays that partition ``range(len(labels))``.

    Stratified plans shuffle each class, then deal members round-robin with a
    counter that carries over between classes, so per-fold class counts and
    fold sizes both differ by at most one.
    """
    labels = np.asarray(labels)
    n = labels.size
    if n < plan.k:
        raise StratificationError(f"{n} samples cannot fill {plan.k} folds")
    classes = np.unique(labels)
    if plan.stratified:
        for c in classes:
            count = int((labels == c).sum())
            if count < plan.k:
                raise StratificationError(f"class {c} has {count} members, fewer than k={plan.k}")
    root = Rng(plan.seed)
    out = []
    for r in range(plan.repeats):
        rng = root.split("folds", r)
        if plan.stratified:
            order = np.concatenate([np.flatnonzero(labels == c)[rng.permutation(int((labels == c).sum()))]
                                    for c in classes])
        else:
            order = rng.permutation(n)
        fold_of = np.arange(n) % plan.k
        out.append([np.sort(order[fold_of == f]) for f in range(plan.k)])
    return out


def stratified_holdout(labels, fraction: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Split indices into (fit, holdout) with ``fraction`` of each class held out."""
    labels = np.asarray(labels)
    fit, hold = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        m = int(round(fraction * idx.size))
        if idx.size >= 2:
            m = min(max(m, 1), idx.size - 1)
        else:
            m = 0
        hold.append(idx[:m])
        fit.append(idx[m:])
    return np.sort(np.concatenate(fit)), np.sort(np.concatenate(hold))


@dataclass
class CvReport:
    scores: np.ndarray  # (repeats, k)
    label: str = ""
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ValueError("scores must be a repeats x k matrix")
        if ((self.scores < 0) | (self.scores > 1)).any():
            raise ValueError("AUC scores must lie in [0, 1]")
        self.mean = float(self.scores.mean())
        # population std over all repeat x fold scores
        self.std = float(self.scores.std())

    @property
    def flat(self) -> np.ndarray:
        return self.scores.reshape(-1)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config", "repeat", "fold", "auc"])
            for r, row in enumerate(self.scores):
                for f, s in enumerate(row):
                    w.writerow([self.label, r, f, repr(float(s))])
            w.writerow([self.label, "mean", "", repr(self.mean)])
            w.writerow([self.label, "std", "", repr(self.std)])

    @classmethod
    def read_csv(cls, path) -> "CvReport":
        cells, label = {}, ""
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                label = row["config"]
                if row["repeat"] not in ("mean", "std"):
                    cells[int(row["repeat"]), int(row["fold"])] = float(row["auc"])
        repeats = 1 + max(r for r, _ in cells)
        k = 1 + max(f for _, f in cells)
        scores = np.array([[cells[r, f] for f in range(k)] for r in range(repeats)])
        return cls(scores, label)


class Classifier(Protocol):
    def fit(self, train: list, val: list, cfg): ...

    def decision_function(self, samples: list) -> np.ndarray: ...


def cross_validate(factory: Callable[[int], Classifier], dataset: list, plan: CvPlan, train_cfg,
                   label: str = "", val_fraction: float = 0.2) -> CvReport:
    """Train a fresh classifier per (repeat, fold) and score AUC on the held-out fold.

    ``factory(seed)`` returns an object with ``fit(train, val, cfg)`` and
    ``decision_function(samples)``. A stratified ``val_fraction`` of the training
    folds is carved out for model selection. Seeds depend only on the plan seed
    and (repeat, fold), so different factories see identical folds and seeds.
    """
    labels = np.array([s.label for s in dataset])
    folds = make_folds(labels, plan)
    root = Rng(plan.seed)
    scores = np.zeros((plan.repeats, plan.k))
    for r, partition in enumerate(folds):
        for f, test_idx in enumerate(partition):
            try:
                train_idx = np.sort(np.concatenate([p for g, p in enumerate(partition) if g != f]))
                fit_rel, val_rel = stratified_holdout(labels[train_idx], val_fraction, root.split("val", r, f))
                seed = int(root.split("seed", r, f).gen.integers(2**31))
                clf = factory(seed)
                clf.fit([dataset[i] for i in train_idx[fit_rel]], [dataset[i] for i in train_idx[val_rel]],
                        _with_seed(train_cfg, seed))
                test = [dataset[i] for i in test_idx]
                scores[r, f] = roc_auc(clf.decision_function(test), labels[test_idx])
            except DVoxError as e:
                raise type(e)(f"repeat {r}, fold {f}: {e}") from e
    return CvReport(scores, label)


def _with_seed(cfg, seed):
    if cfg is None or not hasattr(cfg, "seed"):
        return cfg
    from dataclasses import replace
    return replace(cfg, seed=seed)


@dataclass
class PairedTestResult:
    statistic: float
    p_value: float
    n_pairs: int
    method: str


def paired_test(a, b, method: str = "paired_t") -> PairedTestResult:
    """Paired comparison of per-(repeat, fold) scores.

    ``paired_t``: t = mean(d) / (sd(d) / sqrt(n)), two-sided Student t with n-1 df.
    ``wilcoxon_signed_rank``: zero differences dropped, statistic W+ - W-,
    exact two-sided p for up to 25 non-zero pairs, normal approximation beyond.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("paired test needs two equal-length score vectors with at least 2 pairs")
    d = a - b
    if not d.any():
        raise DegenerateTestError("all paired differences are zero")
    if method == "paired_t":
        return _paired_t(d)
    if method == "wilcoxon_signed_rank":
        return _wilcoxon(d)
    raise ValueError(f"unknown method {method!r}")


def _paired_t(d) -> PairedTestResult:
    n = d.size
    sd = d.std(ddof=1)
    if sd == 0:
        raise DegenerateTestError("paired differences have zero variance")
    t = d.mean() / (sd / math.sqrt(n))
    p = 2 * stats.t.sf(abs(t), n - 1)
    return PairedTestResult(float(t), float(min(1.0, p)), n, "paired_t")


def _wilcoxon(d) -> PairedTestResult:
    d = d[d != 0]
    n = d.size
    ranks = stats.rankdata(np.abs(d))
    w_plus = ranks[d > 0].sum()
    total = ranks.sum()
    statistic = 2 * w_plus - total  # W+ - W-
    if n <= 25:
        doubled = np.rint(2 * ranks).astype(np.int64)
        dist = np.zeros(int(doubled.sum()) + 1)
        dist[0] = 1.0
        for r in doubled:
            dist[r:] = dist[r:] + dist[:-r]
        dist /= 2.0 ** n
        # work in doubled-rank units so midranks stay integral
        s_obs = abs(int(np.rint(2 * statistic)))
        t2 = int(doubled.sum())
        w2 = np.arange(dist.size)
        extreme = np.abs(2 * w2 - t2) >= s_obs
        p = float(dist[extreme].sum())
    else:
        _, counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - (counts ** 3 - counts).sum() / 48
        z = (w_plus - total / 2) / math.sqrt(var)
        p = float(2 * stats.norm.sf(abs(z)))
    return PairedTestResult(float(statistic), min(1.0, p), n, "wilcoxon_signed_rank")


@dataclass
class AblationRow:
    report: CvReport
    t_test: PairedTestResult | None = None
    wilcoxon: PairedTestResult | None = None
    marker: str = ""


def compare_to_baseline(reports: Sequence[CvReport], baseline: str = "- ; -", alpha: float = ALPHA) -> list[AblationRow]:
    """Paired tests of every report against the baseline report (the first one if
    ``baseline`` is absent). Markers: ``reference``, ``increase``, ``decrease``."""
    base = next((r for r in reports if r.label == baseline), reports[0])
    rows = []
    for rep in reports:
        if rep is base:
            rows.append(AblationRow(rep, marker="reference"))
            continue
        row = AblationRow(rep)
        for method, attr in (("paired_t", "t_test"), ("wilcoxon_signed_rank", "wilcoxon")):
            try:
                setattr(row, attr, paired_test(rep.flat, base.flat, method))
            except DegenerateTestError:
                pass
        if row.t_test is not None and row.t_test.p_value < alpha:
            row.marker = "increase" if rep.mean > base.mean else "decrease"
        rows.append(row)
    return rows


def _p(res: PairedTestResult | None) -> str:
    return "n/a" if res is None else f"{res.p_value:.4g}"


def ablation_markdown(rows: list[AblationRow]) -> str:
    lines = ["| Conv3D idx ; VoxRes idx | ROC/AUC mean +/- std | p (paired t) | p (Wilcoxon) | significance |",
             "|---|---|---|---|---|"]
    for row in rows:
        rep = row.report
        lines.append(f"| {rep.label} | {rep.mean:.3f} +/- {rep.std:.3f} | {_p(row.t_test)} | {_p(row.wilcoxon)} "
                     f"| {row.marker} |")
    return "\n".join(lines) + "\n"


def write_ablation_csv(rows: list[AblationRow], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "mean", "std", "t_statistic", "p_paired_t", "w_statistic", "p_wilcoxon", "marker"])
        for row in rows:
            t, wx = row.t_test, row.wilcoxon
            w.writerow([row.report.label, repr(row.report.mean), repr(row.report.std),
                        "" if t is None else repr(t.statistic), "" if t is None else repr(t.p_value),
                        "" if wx is None else repr(wx.statistic), "" if wx is None else repr(wx.p_value),
                        row.marker])
