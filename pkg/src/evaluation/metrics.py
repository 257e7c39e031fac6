"""
Downstream metrics: WA/UA for classification, MAE/Pearson for regression,
EER for verification, plus cosine helpers shared with translation
inspection.
"""

import numpy as np
from scipy.stats import pearsonr
from sklearn.metrics import accuracy_score, mean_absolute_error, recall_score, roc_curve

from src.config import NUM_SPECIAL_TOKENS
from src.errors import ContractError


def _check_lengths(preds, labels, minimum: int = 1) -> tuple[np.ndarray, np.ndarray]:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ContractError(f"predictions {preds.shape} and labels {labels.shape} must be equal-length vectors")
    if len(labels) < minimum:
        raise ContractError(f"need at least {minimum} predictions, got {len(labels)}")
    return preds, labels


def metrics_classification(preds, labels) -> tuple[float, float]:
    """(WA, UA): overall accuracy and mean recall over the classes present in `labels`."""
    preds, labels = _check_lengths(preds, labels)
    wa = accuracy_score(labels, preds)
    ua = recall_score(labels, preds, labels=np.unique(labels), average="macro", zero_division=0)
    return float(wa), float(ua)


def metrics_regression(preds, labels) -> tuple[float, float | None]:
    """(MAE, Corr). Corr is None when it is undefined (fewer than 2 points or zero variance)."""
    preds, labels = _check_lengths(preds, labels)
    mae = float(mean_absolute_error(labels, preds))
    if len(labels) < 2 or np.ptp(preds) == 0 or np.ptp(labels) == 0:
        return mae, None
    return mae, float(pearsonr(preds.astype(np.float64), labels.astype(np.float64))[0])


def metrics_eer(scores, is_same) -> float:
    """Equal error rate over all score thresholds, interpolating linearly between the two
    thresholds whose false-reject minus false-accept changes sign."""
    scores, is_same = _check_lengths(scores, is_same)
    is_same = is_same.astype(bool)
    if is_same.all() or not is_same.any():
        raise ContractError("EER needs both same-speaker and different-speaker trials")
    fpr, tpr, _ = roc_curve(is_same, scores, drop_intermediate=False)
    fnr = 1.0 - tpr
    gap = fnr - fpr  # non-increasing as the threshold drops
    i = int(np.argmax(gap <= 0))
    if gap[i] == 0 or i == 0:
        return float(fpr[i])
    t = gap[i - 1] / (gap[i - 1] - gap[i])
    return float(fpr[i - 1] + t * (fpr[i] - fpr[i - 1]))


def score_pair(e1, e2) -> float:
    """Cosine similarity of two embeddings."""
    e1, e2 = np.asarray(e1, dtype=np.float64), np.asarray(e2, dtype=np.float64)
    denom = np.linalg.norm(e1) * np.linalg.norm(e2)
    if denom == 0:
        return 0.0
    return float(np.clip(e1 @ e2 / denom, -1.0, 1.0))


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine between two equally shaped matrices."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-12)
    return (a * b).sum(axis=1) / denom


def nearest_tokens(rows: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Model id of the non-special token whose embedding has the highest cosine to each row."""
    rows = np.asarray(rows, dtype=np.float64)
    vocab = np.asarray(table, dtype=np.float64)[NUM_SPECIAL_TOKENS:]
    rows_n = rows / np.maximum(np.linalg.norm(rows, axis=1, keepdims=True), 1e-12)
    vocab_n = vocab / np.maximum(np.linalg.norm(vocab, axis=1, keepdims=True), 1e-12)
    return np.argmax(rows_n @ vocab_n.T, axis=1) + NUM_SPECIAL_TOKENS
