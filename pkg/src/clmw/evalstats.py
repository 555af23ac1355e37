"""Evaluation metrics and summary statistics for masked-LM and regression runs.

Implements masked cross-entropy loss, pseudo-perplexity, top-1 and
one-vs-rest masked accuracy, support-weighted F1, the standard regression
metrics (MAE, RMSE, Pearson R, R^2), and mean +/- Student-t confidence
intervals for small sample sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class NoMaskedPositions(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class DegenerateReference(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


# Two-sided 95% critical values of the Student-t distribution by degrees of
# freedom (NIST table); beyond 30 d.o.f. the asymptotic value is used.
_T_CRIT_95 = {
    1: 12.706, 2: 4.303, 3: 3.182, 4: 2.776, 5: 2.571,
    6: 2.447, 7: 2.365, 8: 2.306, 9: 2.262, 10: 2.228,
    11: 2.201, 12: 2.179, 13: 2.160, 14: 2.145, 15: 2.131,
    16: 2.120, 17: 2.110, 18: 2.101, 19: 2.093, 20: 2.086,
    21: 2.080, 22: 2.074, 23: 2.069, 24: 2.064, 25: 2.060,
    26: 2.056, 27: 2.052, 28: 2.048, 29: 2.045, 30: 2.042,
}
_T_CRIT_ASYMPTOTIC = 1.96


def t_critical(dof: int) -> float:
    """95% two-sided Student-t critical value for the given degrees of freedom."""
    if dof < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {dof}")
    return _T_CRIT_95.get(dof, _T_CRIT_ASYMPTOTIC)


@dataclass
class MaskedEvalBatch:
    """Aligned predictions and references over the masked positions of a batch.

    ref_ids[i] is the original token id at masked position i, pred_ids[i] the
    model's argmax prediction there, and ref_logprobs[i] the model's
    log-probability of the original token.
    """

    ref_ids: np.ndarray
    pred_ids: np.ndarray
    ref_logprobs: np.ndarray

    def __post_init__(self):
        self.ref_ids = np.asarray(self.ref_ids, dtype=np.int64)
        self.pred_ids = np.asarray(self.pred_ids, dtype=np.int64)
        self.ref_logprobs = np.asarray(self.ref_logprobs, dtype=np.float64)
        if not (len(self.ref_ids) == len(self.pred_ids) == len(self.ref_logprobs)):
            raise LengthMismatch(
                f"misaligned batch: {len(self.ref_ids)} refs, "
                f"{len(self.pred_ids)} preds, {len(self.ref_logprobs)} logprobs"
            )

    @classmethod
    def from_logprobs(cls, logprobs: np.ndarray, ref_ids) -> "MaskedEvalBatch":
        """Build a batch from a (n_masked, vocab) log-probability matrix."""
        logprobs = np.asarray(logprobs, dtype=np.float64)
        ref_ids = np.asarray(ref_ids, dtype=np.int64)
        if logprobs.ndim != 2 or len(ref_ids) != logprobs.shape[0]:
            raise LengthMismatch(
                f"logprobs shape {logprobs.shape} incompatible with {len(ref_ids)} refs"
            )
        pred_ids = np.argmax(logprobs, axis=1)
        ref_lp = logprobs[np.arange(len(ref_ids)), ref_ids]
        return cls(ref_ids=ref_ids, pred_ids=pred_ids, ref_logprobs=ref_lp)

    def __len__(self) -> int:
        return len(self.ref_ids)

    def supports(self) -> dict[int, int]:
        """Reference-class frequencies (supports) over the masked positions."""
        ids, counts = np.unique(self.ref_ids, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}


def masked_loss(batch: MaskedEvalBatch) -> float:
    """Mean negative log-likelihood of the original tokens at masked positions."""
    if len(batch) == 0:
        raise NoMaskedPositions("batch has no masked positions")
    return float(-np.mean(batch.ref_logprobs))


def pppl(batch_or_loss) -> float:
    """Pseudo-perplexity: exp of the mean masked negative log-likelihood."""
    if isinstance(batch_or_loss, MaskedEvalBatch):
        return math.exp(masked_loss(batch_or_loss))
    return math.exp(float(batch_or_loss))


def masked_accuracy(batch: MaskedEvalBatch) -> float:
    """Top-1 accuracy over masked positions."""
    if len(batch) == 0:
        raise NoMaskedPositions("batch has no masked positions")
    return float(np.mean(batch.pred_ids == batch.ref_ids))


def class_accuracy(batch: MaskedEvalBatch) -> float:
    """Support-weighted one-vs-rest accuracy, averaged over reference classes.

    Per class v the one-vs-rest accuracy is (TP_v + TN_v) / n_masked; classes
    are weighted by their support. Reported separately from top-1 because
    the two aggregations differ whenever more than one class is present.
    """
    if len(batch) == 0:
        raise NoMaskedPositions("batch has no masked positions")
    n = len(batch)
    total = 0.0
    weight = 0
    for cls_id, support in batch.supports().items():
        is_ref = batch.ref_ids == cls_id
        is_pred = batch.pred_ids == cls_id
        tp = int(np.sum(is_pred & is_ref))
        tn = int(np.sum(~is_pred & ~is_ref))
        total += support * (tp + tn) / n
        weight += support
    return total / weight


def weighted_f1(batch: MaskedEvalBatch) -> float:
    """Support-weighted mean of per-class F1 over classes with support > 0.

    F1 of a class is 0 when its precision + recall is 0.
    """
    if len(batch) == 0:
        raise NoMaskedPositions("batch has no masked positions")
    total = 0.0
    weight = 0
    for cls_id, support in batch.supports().items():
        is_ref = batch.ref_ids == cls_id
        is_pred = batch.pred_ids == cls_id
        tp = int(np.sum(is_pred & is_ref))
        fp = int(np.sum(is_pred & ~is_ref))
        fn = int(np.sum(~is_pred & is_ref))
        if tp == 0:
            f1 = 0.0
        else:
            precision = tp / (tp + fp)
            recall = tp / (tp + fn)
            f1 = 2.0 * precision * recall / (precision + recall)
        total += support * f1
        weight += support
    return total / weight


@dataclass
class RegressionReport:
    mae: float
    rmse: float
    pearson_r: float
    r2: float

    def as_dict(self) -> dict[str, float]:
        return {"mae": self.mae, "rmse": self.rmse,
                "pearson_r": self.pearson_r, "r2": self.r2}


def regression_metrics(pred, ref) -> RegressionReport:
    """MAE, RMSE, Pearson R and R^2 (1 - SSres/SStot) of predictions vs references."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape or pred.ndim != 1:
        raise LengthMismatch(f"pred shape {pred.shape} vs ref shape {ref.shape}")
    if len(pred) < 2:
        raise LengthMismatch("need at least 2 samples")
    resid = pred - ref
    mae = float(np.mean(np.abs(resid)))
    rmse = float(math.sqrt(np.mean(resid ** 2)))
    ss_tot = float(np.sum((ref - np.mean(ref)) ** 2))
    if ss_tot == 0.0:
        raise DegenerateReference("reference values are constant")
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot
    pred_c = pred - np.mean(pred)
    ref_c = ref - np.mean(ref)
    denom = math.sqrt(float(np.sum(pred_c ** 2)) * float(np.sum(ref_c ** 2)))
    if denom == 0.0:
        # constant predictions: correlation undefined, conventionally 0
        pearson = 0.0
    else:
        pearson = float(np.sum(pred_c * ref_c)) / denom
    return RegressionReport(mae=mae, rmse=rmse, pearson_r=pearson, r2=r2)


@dataclass
class SummaryStat:
    n: int
    mean: float
    s_n: float
    t_crit: float
    ci_half: float

    def as_dict(self) -> dict[str, float]:
        return {"n": self.n, "mean": self.mean, "s_N": self.s_n,
                "t": self.t_crit, "ci_half": self.ci_half}

    def __str__(self) -> str:
        return f"{self.mean:.4f} +/- {self.ci_half:.4f} (n={self.n})"


def summarize(values, confidence: float = 0.95) -> SummaryStat:
    """Sample mean, sample std (n-1 divisor) and 95% CI half-width.

    The CI half-width is (s_N / sqrt(n)) * t where t is the two-sided
    Student-t critical value at n-1 degrees of freedom.
    """
    if confidence != 0.95:
        raise ValueError("only the 95% confidence level is supported")
    vals = np.asarray(list(values), dtype=np.float64)
    n = len(vals)
    if n < 2:
        raise TooFewSamples(f"need >= 2 samples for a summary, got {n}")
    mean = float(np.mean(vals))
    s_n = float(math.sqrt(np.sum((vals - mean) ** 2) / (n - 1)))
    t = t_critical(n - 1)
    ci_half = (s_n / math.sqrt(n)) * t
    return SummaryStat(n=n, mean=mean, s_n=s_n, t_crit=t, ci_half=ci_half)
