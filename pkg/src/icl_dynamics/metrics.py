"""Per-curve scores, baselines, smoothing, bootstrap CIs, and significance.

All logarithms are natural, so binary entropy saturates at ln 2 ≈ 0.693 and
log-likelihoods are in nats throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CalibrationError, InsufficientDataError, PairingError
from .extract import DynamicsCurve

BOLD_Z = 1.96  # two-sided 95% significance for mean differences
GUESS_Z = 1.645  # one-sided 95% check against the guessing baseline


@dataclass(frozen=True)
class CurveScores:
    """Per-context-size scores of one run."""

    correct: np.ndarray
    loglik: np.ndarray
    entropy: np.ndarray
    ties: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.loglik)


def score_curve(curve: DynamicsCurve) -> CurveScores:
    """Accuracy / log-likelihood / entropy per context size.

    Accuracy uses argmax with lowest-class-index tie-breaking; exact ties are
    recorded. The target is always the displayed label.
    """
    probs = curve.probs
    targets = np.asarray(curve.displayed_labels)
    predicted = probs.argmax(axis=1)
    top = probs.max(axis=1, keepdims=True)
    ties = tuple(int(i) for i in np.flatnonzero((probs == top).sum(axis=1) > 1))
    with np.errstate(divide="ignore"):
        loglik = np.log(probs[np.arange(len(targets)), targets])
        entropy = -np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0).sum(axis=1)
    return CurveScores(
        correct=(predicted == targets),
        loglik=loglik,
        entropy=entropy,
        ties=ties,
    )


def guessing_baseline(frequencies: Sequence[float]) -> tuple[float, float, float]:
    """(accuracy, log-likelihood, entropy) of the informed constant guesser.

    Predicting the class frequencies for every input scores accuracy p_max,
    log-likelihood Σ p ln p and entropy −Σ p ln p under the same label
    distribution (0 ln 0 taken as 0).
    """
    p = np.asarray(frequencies, dtype=float)
    nz = p[p > 0]
    plogp = float((nz * np.log(nz)).sum())
    return float(p.max()), plogp, -plogp


def calibrate(probs: Sequence[float], prior: Sequence[float]) -> np.ndarray:
    """Divide by a prior prediction and renormalize.

    ``prior`` is typically the model's prediction for a content-free input
    through the same template and context; a uniform prior is the identity.
    """
    p = np.asarray(probs, dtype=float)
    q = np.asarray(prior, dtype=float)
    if p.shape != q.shape:
        raise CalibrationError(f"shape mismatch {p.shape} vs {q.shape}")
    if (q <= 0).any():
        raise CalibrationError("calibration prior must be strictly positive")
    out = p / q
    return out / out.sum()


def moving_average(series: Sequence[float], window: int) -> np.ndarray:
    """Centered moving average with shrunken windows at the edges.

    Output has the input's length; window 1 is the identity. For even
    windows the extra neighbor is taken on the right.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(series, dtype=float)
    left = (window - 1) // 2
    right = window // 2
    out = np.empty_like(x)
    for i in range(len(x)):
        lo = max(0, i - left)
        hi = min(len(x), i + right + 1)
        out[i] = x[lo:hi].mean()
    return out


def bootstrap_ci(
    values: Sequence[float],
    level: float = 0.99,
    resamples: int = 10_000,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean; deterministic given seed."""
    x = np.asarray(values, dtype=float)
    if len(x) < 2:
        raise InsufficientDataError(f"bootstrap needs >= 2 runs, got {len(x)}")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(x), size=(resamples, len(x)))
    means = x[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def mean_and_se(values: Sequence[float]) -> tuple[float, float]:
    x = np.asarray(values, dtype=float)
    if len(x) < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(len(x)))


def significance_difference(
    default_values: Sequence[float],
    variant_values: Sequence[float],
    paired: bool = True,
) -> tuple[float, float]:
    """Mean difference default − variant and its standard error.

    Paired mode (the default; scenarios sampled with shared seeds share
    their contexts) takes the SE of the per-run differences; unpaired mode
    combines the two SEs in quadrature.
    """
    d = np.asarray(default_values, dtype=float)
    v = np.asarray(variant_values, dtype=float)
    if paired:
        if len(d) != len(v):
            raise PairingError(
                f"paired difference needs equal run counts, got {len(d)} and {len(v)}"
            )
        return mean_and_se(d - v)
    dm, dse = mean_and_se(d)
    vm, vse = mean_and_se(v)
    return dm - vm, float(np.hypot(dse, vse))


def outperforms_guessing(
    acc_values: Sequence[float],
    loglik_values: Sequence[float],
    acc_baseline: float,
    loglik_baseline: float,
) -> bool:
    """Is default-label performance significantly better than guessing?

    Verbatim rule: mean plus 1.645 × SE must exceed the baseline for both
    accuracy and log-likelihood. The "+" makes the check lenient (a
    conservative test would subtract) but it is applied as stated.
    """
    acc_mean, acc_se = mean_and_se(acc_values)
    ll_mean, ll_se = mean_and_se(loglik_values)
    return bool(
        acc_mean + GUESS_Z * acc_se > acc_baseline
        and ll_mean + GUESS_Z * ll_se > loglik_baseline
    )


@dataclass(frozen=True)
class SignificanceCell:
    """One summary-table cell: Δ = metric(default) − metric(variant).

    ``bold`` flags |Δ| > 1.96·SE; ``gray`` flags cells whose default-label
    condition does not beat the guessing baseline (determined solely from
    the default condition, never from the variant).
    """

    mean_diff: float
    se_diff: float
    bold: bool
    gray: bool


def cell_from_summary(mean_diff: float, se_diff: float, gray: bool = False) -> SignificanceCell:
    """Build a cell from already-aggregated statistics."""
    return SignificanceCell(
        mean_diff=float(mean_diff),
        se_diff=float(se_diff),
        bold=bool(abs(mean_diff) > BOLD_Z * se_diff),
        gray=bool(gray),
    )


def significance(
    default_metric: Sequence[float],
    variant_metric: Sequence[float],
    default_accuracy: Sequence[float],
    default_loglik: Sequence[float],
    baseline_accuracy: float,
    baseline_loglik: float,
    paired: bool = True,
) -> SignificanceCell:
    """Full cell from per-run values at maximum context size."""
    diff, se = significance_difference(default_metric, variant_metric, paired=paired)
    better = outperforms_guessing(
        default_accuracy, default_loglik, baseline_accuracy, baseline_loglik
    )
    return cell_from_summary(diff, se, gray=not better)


@dataclass(frozen=True)
class MetricCurves:
    """Aggregates of many runs: per-size means and standard errors."""

    num_runs: int
    accuracy_mean: np.ndarray
    accuracy_se: np.ndarray
    loglik_mean: np.ndarray
    loglik_se: np.ndarray
    entropy_mean: np.ndarray
    entropy_se: np.ndarray

    def __len__(self) -> int:
        return len(self.loglik_mean)


def aggregate_scores(scores: Sequence[CurveScores]) -> MetricCurves:
    """Stack per-run scores into per-size means/SEs (runs must share length)."""
    if not scores:
        raise InsufficientDataError("no runs to aggregate")
    lengths = {len(s) for s in scores}
    if len(lengths) != 1:
        raise InsufficientDataError(f"runs have mixed curve lengths: {sorted(lengths)}")
    acc = np.stack([s.correct.astype(float) for s in scores])
    ll = np.stack([s.loglik for s in scores])
    ent = np.stack([s.entropy for s in scores])

    def se(m: np.ndarray) -> np.ndarray:
        if m.shape[0] < 2:
            return np.zeros(m.shape[1])
        return m.std(axis=0, ddof=1) / np.sqrt(m.shape[0])

    return MetricCurves(
        num_runs=len(scores),
        accuracy_mean=acc.mean(axis=0),
        accuracy_se=se(acc),
        loglik_mean=ll.mean(axis=0),
        loglik_se=se(ll),
        entropy_mean=ent.mean(axis=0),
        entropy_se=se(ent),
    )
