"""Embedding-space evaluation metrics.

Top-k retrieval accuracy over a cosine-similarity matrix (row i queries
the columns; the diagonal is the true partner), its chance-adjusted
multiplicative variant, the coefficient of determination, and ROC AUC in
the Mann-Whitney pairwise-concordance form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import (
    ContractError,
    DegenerateInputError,
    DegenerateLabelError,
    DegenerateTargetError,
    DimensionError,
)

DEFAULT_K_VALUES = (5, 25, 100)


@dataclass
class MetricReport:
    """Evaluation results keyed the way the CSV/JSON exports expect."""

    k_values: list[int] = field(default_factory=list)
    top_k: dict[int, float] = field(default_factory=dict)
    mult_top_k: dict[int, float] = field(default_factory=dict)
    r2_per_measure: dict[str, float] = field(default_factory=dict)
    auc_per_label: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "k_values": self.k_values,
                "top_k": {str(k): v for k, v in self.top_k.items()},
                "mult_top_k": {str(k): v for k, v in self.mult_top_k.items()},
                "r2_per_measure": self.r2_per_measure,
                "auc_per_label": self.auc_per_label,
            },
            sort_keys=True,
        )

    def csv_rows(self, step: int) -> list[tuple]:
        """One row per (step, metric, k or name, value)."""
        rows: list[tuple] = []
        for k in self.k_values:
            rows.append((step, "top_k", k, self.top_k[k]))
        for k in self.k_values:
            rows.append((step, "mult_top_k", k, self.mult_top_k[k]))
        for name, value in self.r2_per_measure.items():
            rows.append((step, "r2", name, value))
        for name, value in self.auc_per_label.items():
            rows.append((step, "auc", name, value))
        return rows


def similarity_matrix(emb_i: np.ndarray, emb_j: np.ndarray) -> np.ndarray:
    """Cosine similarities of two paired embedding sets (numpy, no tape)."""
    if emb_i.shape != emb_j.shape or emb_i.ndim != 2:
        raise DimensionError(
            f"paired embeddings must share N x D, got {emb_i.shape} vs {emb_j.shape}"
        )
    ni = np.linalg.norm(emb_i, axis=1, keepdims=True)
    nj = np.linalg.norm(emb_j, axis=1, keepdims=True)
    if np.any(ni == 0.0) or np.any(nj == 0.0):
        raise DegenerateInputError("zero-norm embedding row")
    return (emb_i / ni) @ (emb_j / nj).T


def _check_square(sim: np.ndarray) -> int:
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise DimensionError(f"similarity matrix must be square, got {sim.shape}")
    return sim.shape[0]


def top_k_accuracy(sim: np.ndarray, k: int, symmetric: bool = False) -> float:
    """Fraction of rows whose diagonal entry ranks in the row's top k.

    Ranking is by descending value; ties break toward the lower column
    index, so results are deterministic.  ``symmetric`` additionally scores
    columns as queries (via the transpose) and averages the two directions;
    the default follows the row-wise definition.
    """
    n = _check_square(sim)
    if not 1 <= k <= n:
        raise ContractError(f"k must be in [1, {n}], got {k}")
    if symmetric:
        return 0.5 * (
            top_k_accuracy(sim, k) + top_k_accuracy(np.ascontiguousarray(sim.T), k)
        )
    diag = np.diagonal(sim)[:, None]
    cols = np.arange(n)[None, :]
    rows = np.arange(n)[:, None]
    stronger = (sim > diag).sum(axis=1)
    tied_earlier = ((sim == diag) & (cols < rows)).sum(axis=1)
    return float(np.mean(stronger + tied_earlier < k))


def multiplicative_top_k(sim: np.ndarray, k: int, symmetric: bool = False) -> float:
    """Top-k accuracy divided by the chance rate k/N; 1.0 is random."""
    n = _check_square(sim)
    return top_k_accuracy(sim, k, symmetric=symmetric) * n / k


def topk_report(
    sim: np.ndarray,
    k_values=DEFAULT_K_VALUES,
    symmetric: bool = False,
) -> MetricReport:
    report = MetricReport(k_values=[int(k) for k in k_values])
    for k in report.k_values:
        report.top_k[k] = top_k_accuracy(sim, k, symmetric=symmetric)
        report.mult_top_k[k] = multiplicative_top_k(sim, k, symmetric=symmetric)
    return report


def r_squared(y: np.ndarray, y_hat: np.ndarray) -> float:
    """1 - SS_res/SS_tot about the mean of y; negative when worse than mean."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.shape != y_hat.shape:
        raise DimensionError(f"lengths differ: {y.shape} vs {y_hat.shape}")
    if y.size < 2:
        raise ContractError("r_squared needs at least two observations")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise DegenerateTargetError("target is constant")
    ss_res = float(np.sum((y - y_hat) ** 2))
    return 1.0 - ss_res / ss_tot


def roc_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """(concordant + 0.5 * tied) / (n_pos * n_neg) via average ranks."""
    labels = np.asarray(labels).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if labels.shape != scores.shape:
        raise DimensionError(f"lengths differ: {labels.shape} vs {scores.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelError("need at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
