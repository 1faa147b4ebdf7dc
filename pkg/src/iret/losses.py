"""Training objectives with hand-derived gradients.

Both losses take an embedding matrix ``Z`` of shape ``(B, d)`` whose rows are
already L2-normalized, and return a :class:`LossResult` holding the scalar
loss and ``dloss/dZ``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.5
    ap_bins: int = 20

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.ap_bins < 2:
            raise ValueError("ap_bins must be >= 2")


@dataclass
class LossResult:
    value: float
    grad: np.ndarray


def _as_batch(Z):
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ShapeError("embedding batch must be B x d with B >= 2, got %s" % (Z.shape,))
    if not np.all(np.isfinite(Z)):
        raise ValueError("embedding batch contains non-finite values")
    return Z


def similarity_matrix(Z):
    Z = np.asarray(Z, dtype=np.float64)
    return Z @ Z.T


def _grad_from_score_grad(G, Z):
    # every S_ij = z_i . z_j is an independent score
    return G @ Z + G.T @ Z


def ntxent(Z, temperature=0.5):
    """NT-Xent over positional pairs: rows (2k, 2k+1) are two views of sample k."""
    Z = _as_batch(Z)
    B = Z.shape[0]
    if B % 2:
        raise ShapeError("NT-Xent needs an even batch (2N views), got %d" % B)
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    logits = similarity_matrix(Z) / temperature
    np.fill_diagonal(logits, -np.inf)
    partner = np.arange(B) ^ 1
    row_max = logits.max(axis=1, keepdims=True)
    expd = np.exp(logits - row_max)
    denom = expd.sum(axis=1, keepdims=True)
    log_denom = np.log(denom[:, 0]) + row_max[:, 0]
    per_view = log_denom - logits[np.arange(B), partner]
    value = float(per_view.sum() / B)

    G = expd / denom
    G[np.arange(B), partner] -= 1.0
    G /= temperature * B
    return LossResult(value, _grad_from_score_grad(G, Z))


def bin_centers(bins):
    step = 2.0 / (bins - 1)
    return 1.0 - step * np.arange(bins), step


def soft_assign(scores, bins):
    """Triangular soft assignment of scores to descending bin centers on [-1, 1].

    Returns ``(delta, ddelta)`` shaped ``scores.shape + (bins,)``.
    """
    centers, step = bin_centers(bins)
    diff = scores[..., None] - centers
    delta = np.maximum(0.0, 1.0 - np.abs(diff) / step)
    ddelta = np.where(delta > 0, -np.sign(diff) / step, 0.0)
    return delta, ddelta


def quantized_ap_scores(scores, relevant, bins=20, with_grad=False):
    """Histogram-binned AP for one query.

    ``scores`` are the candidates' similarities, ``relevant`` a boolean mask.
    With ``with_grad`` returns ``(ap, dap/dscores)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(relevant, dtype=np.float64)
    n_pos = y.sum()
    if n_pos <= 0:
        raise DataError("query has no positive candidate")
    delta, ddelta = soft_assign(scores, bins)
    h = delta.sum(axis=0)
    h_pos = y @ delta
    H = np.cumsum(h)
    H_pos = np.cumsum(h_pos)
    occupied = H > 0
    safe_H = np.where(occupied, H, 1.0)
    prec = np.where(occupied, H_pos / safe_H, 0.0)
    rec_gain = h_pos / n_pos
    ap = float((prec * rec_gain).sum())
    if not with_grad:
        return ap
    # dAP/d delta_mj = y_j * A_m + C_m, suffix sums over bins k >= m
    inv_H = np.where(occupied, 1.0 / safe_H, 0.0)
    A = prec / n_pos + np.cumsum((rec_gain * inv_H)[::-1])[::-1]
    Cm = -np.cumsum((H_pos * rec_gain * inv_H**2)[::-1])[::-1]
    dd = y[:, None] * A + Cm
    return ap, (dd * ddelta).sum(axis=1)


def quantized_ap_loss(Z, labels, bins=20):
    """``1 - mean_i AP_i`` with each row as a query against all other rows."""
    Z = _as_batch(Z)
    labels = np.asarray(labels)
    B = Z.shape[0]
    if labels.shape != (B,):
        raise ShapeError("need one label per row")
    if bins < 2:
        raise ValueError("ap_bins must be >= 2")
    S = similarity_matrix(Z)
    G = np.zeros((B, B))
    total = 0.0
    for i in range(B):
        others = np.arange(B) != i
        relevant = labels[others] == labels[i]
        if not relevant.any():
            raise DataError("query row %d has no positive in the batch" % i)
        ap, dap = quantized_ap_scores(S[i, others], relevant, bins, with_grad=True)
        total += ap
        G[i, others] = -dap / B
    value = 1.0 - total / B
    return LossResult(float(value), _grad_from_score_grad(G, Z))
