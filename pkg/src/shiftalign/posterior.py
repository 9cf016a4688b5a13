"""Test-time prior correction of a source-trained classifier posterior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, UndefinedPredictionError
from .model import class_posterior


def _check_gamma(gamma, c):
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != (c,):
        raise DimensionError(f"gamma has shape {gamma.shape}, expected ({c},)")
    if np.any(gamma < 0) or not np.all(np.isfinite(gamma)):
        raise DomainError("gamma must be finite and non-negative")
    if not np.any(gamma > 0):
        raise DomainError("gamma is identically zero")
    return gamma


def align_posterior(posterior, gamma, strict: bool = True) -> np.ndarray:
    """Reweight each row by ``gamma`` and renormalise.

    Accepts a single row or an n x c matrix. Rows whose mass lies entirely on
    zero-weight classes raise :class:`UndefinedPredictionError`, or come back
    as NaN rows when ``strict`` is False.
    """
    p = np.asarray(posterior, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    gamma = _check_gamma(gamma, p.shape[1])
    weighted = p * gamma
    total = weighted.sum(axis=1, keepdims=True)
    bad = total[:, 0] <= 0
    if strict and np.any(bad):
        raise UndefinedPredictionError(np.nonzero(bad)[0])
    with np.errstate(invalid="ignore", divide="ignore"):
        out = weighted / total
    out[bad] = np.nan
    return out[0] if single else out


def literal_correction(posterior, gamma) -> np.ndarray:
    """The unnormalised variant ``gamma_i p_i / (|gamma|_1 * sum_j p_j)``; same argmax as
    :func:`align_posterior`, kept for debug dumps."""
    p = np.atleast_2d(np.asarray(posterior, dtype=np.float64))
    gamma = _check_gamma(gamma, p.shape[1])
    return gamma * p / (gamma.sum() * p.sum(axis=1, keepdims=True))


@dataclass
class CorrectedEvaluation:
    uncorrected_accuracy: float
    corrected_accuracy: float
    per_class_recall: np.ndarray
    undefined_rows: np.ndarray
    predictions_uncorrected: np.ndarray
    predictions_corrected: np.ndarray
    corrected: np.ndarray


def evaluate_posteriors(posterior, labels, gamma) -> CorrectedEvaluation:
    """Accuracy before and after correction. Undefined rows predict -1 and count as errors."""
    posterior = np.asarray(posterior, dtype=np.float64)
    labels = np.asarray(labels)
    corrected = align_posterior(posterior, gamma, strict=False)
    undefined = np.isnan(corrected).any(axis=1)
    pred_u = posterior.argmax(axis=1)
    pred_c = np.where(undefined, -1, np.nan_to_num(corrected, nan=-1.0).argmax(axis=1))
    c = posterior.shape[1]
    recall = np.full(c, np.nan)
    for i in range(c):
        rows = labels == i
        if rows.any():
            recall[i] = float(np.mean(pred_c[rows] == i))
    return CorrectedEvaluation(
        uncorrected_accuracy=float(np.mean(pred_u == labels)),
        corrected_accuracy=float(np.mean(pred_c == labels)),
        per_class_recall=recall,
        undefined_rows=np.nonzero(undefined)[0],
        predictions_uncorrected=pred_u,
        predictions_corrected=pred_c,
        corrected=corrected,
    )


def evaluate_corrected(model, pair, gamma) -> CorrectedEvaluation:
    """Evaluate a trained model on the pair's target data using the sealed labels."""
    posterior = class_posterior(model, pair.target_x)
    return evaluate_posteriors(posterior, pair.sealed.target_y, gamma)


def write_prediction_dump(path, evaluation: CorrectedEvaluation):
    """CSV ``row_id,argmax_uncorrected,argmax_corrected,p_corrected_1..c``."""
    c = evaluation.corrected.shape[1]
    lines = [",".join(["row_id", "argmax_uncorrected", "argmax_corrected"]
                      + [f"p_corrected_{i + 1}" for i in range(c)])]
    for i, (pu, pc, row) in enumerate(zip(evaluation.predictions_uncorrected,
                                          evaluation.predictions_corrected,
                                          evaluation.corrected)):
        lines.append(",".join([str(i), str(int(pu)), str(int(pc))] + [repr(float(v)) for v in row]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
