"""The multi-objective loss stack.

Four symmetric contrastive terms over pairs of embedding batches, two
measure-prediction MSE terms, two reconstruction MSE terms, and their
weighted aggregation into a per-step report.  All functions here are pure
and operate on tape tensors so gradients flow through every term.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, DomainError, PairingError


class Modality(str, enum.Enum):
    FUNDUS = "fundus"
    CAROTID = "carotid"


class View(str, enum.Enum):
    VISIT_T = "visit_t"
    VISIT_T_PRIME = "visit_t_prime"
    EYE_RIGHT = "eye_right"
    EYE_LEFT = "eye_left"
    PLAIN = "plain"


# canonical order of loss terms; aggregation and reports follow it
TERM_ORDER = (
    "contr_fc",
    "contr_fv",
    "contr_cv",
    "contr_eye",
    "pred_r",
    "pred_c",
    "rec_f",
    "rec_c",
)


@dataclass
class EmbeddingBatch:
    """Projected embeddings for one modality/view; row i of a paired batch
    refers to the same participant as row i of its partner."""

    values: Tensor
    modality_tag: Modality
    view_tag: View = View.PLAIN

    def __post_init__(self):
        if self.values.value.ndim != 2:
            raise DimensionError(
                f"embedding batch must be N x D, got {self.values.shape}"
            )
        n, d = self.values.shape
        if n < 1 or d < 2:
            raise ContractError(f"embedding batch needs N >= 1, D >= 2, got {n}x{d}")

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class Temperature:
    """Softmax temperature; positive always, learnable via log-parameterization."""

    tau: float = 0.07
    learnable: bool = False

    PARAM_NAME = "log_tau"

    def __post_init__(self):
        if self.tau <= 0.0:
            raise DomainError(f"temperature must be positive, got {self.tau}")

    def initial_param(self) -> np.ndarray:
        return np.asarray(math.log(self.tau), dtype=np.float64)

    def resolve(self, log_tau: Tensor | None = None) -> float | Tensor:
        """The tau to feed the losses: a float when fixed, the exp of the
        live log-tau leaf when learnable."""
        if not self.learnable:
            return self.tau
        if log_tau is None:
            raise ContractError("learnable temperature needs its log-tau tensor")
        return ad.exp(log_tau)


@dataclass
class LossWeights:
    """Non-negative weight per term; the printed total is all-ones with the
    reconstruction weights zeroed (see ``paper_total``)."""

    w_fc: float = 1.0
    w_fv: float = 1.0
    w_cv: float = 1.0
    w_eye: float = 1.0
    w_pred_r: float = 1.0
    w_pred_c: float = 1.0
    w_rec_f: float = 1.0
    w_rec_c: float = 1.0

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if value < 0.0:
                raise ContractError(f"loss weight {name} must be >= 0, got {value}")

    @classmethod
    def paper_total(cls) -> "LossWeights":
        """Weights reproducing the printed six-term total exactly."""
        return cls(w_rec_f=0.0, w_rec_c=0.0)

    def as_dict(self) -> dict[str, float]:
        return {
            "contr_fc": self.w_fc,
            "contr_fv": self.w_fv,
            "contr_cv": self.w_cv,
            "contr_eye": self.w_eye,
            "pred_r": self.w_pred_r,
            "pred_c": self.w_pred_c,
            "rec_f": self.w_rec_f,
            "rec_c": self.w_rec_c,
        }

    def of(self, term: str) -> float:
        d = self.as_dict()
        if term not in d:
            raise ContractError(f"unknown loss term {term!r}")
        return d[term]


@dataclass
class LossReport:
    """Per-term scalar losses plus the weighted total for one step."""

    step: int
    terms: dict[str, float] = field(default_factory=dict)
    total: float = 0.0

    def to_json_line(self) -> str:
        record = {"step": self.step}
        record.update({k: self.terms[k] for k in TERM_ORDER if k in self.terms})
        record["total"] = self.total
        return json.dumps(record)

    @classmethod
    def from_json_line(cls, line: str) -> "LossReport":
        record = json.loads(line)
        step = record.pop("step")
        total = record.pop("total")
        return cls(step=step, terms=record, total=total)


def cosine_similarity_matrix(u: EmbeddingBatch, v: EmbeddingBatch) -> Tensor:
    """Entry (i, j) is the cosine similarity of u_i and v_j."""
    if u.values.shape != v.values.shape:
        raise DimensionError(
            f"paired batches must share N x D, got {u.values.shape} "
            f"vs {v.values.shape}"
        )
    un = ad.row_l2_normalize(u.values)
    vn = ad.row_l2_normalize(v.values)
    return ad.matmul(un, ad.transpose(vn, (1, 0)))


def _scaled_logits(sim: Tensor, tau: float | Tensor) -> Tensor:
    if isinstance(tau, Tensor):
        inv = ad.exp(ad.neg(ad.log(tau)))
        return ad.mul(sim, inv)
    if tau <= 0.0:
        raise DomainError(f"temperature must be positive, got {tau}")
    return ad.mul(sim, 1.0 / tau)


def contrastive_loss(
    u: EmbeddingBatch, v: EmbeddingBatch, tau: float | Tensor
) -> Tensor:
    """Mean over rows of -log softmax(sim/tau) at the diagonal.

    Computed as logsumexp(row) - diagonal, with max subtraction inside the
    logsumexp, so it is exact for N = 1 and stable for small tau.
    """
    logits = _scaled_logits(cosine_similarity_matrix(u, v), tau)
    lse = ad.row_logsumexp(logits)
    diag = ad.take_diagonal(logits)
    return ad.mean_all(ad.sub(lse, diag))


def clip_loss(u: EmbeddingBatch, v: EmbeddingBatch, tau: float | Tensor) -> Tensor:
    """Symmetric contrastive loss: mean of the two row-wise directions.

    The two directional terms use identical code paths, and IEEE addition
    commutes, so swapping the operands returns bitwise the same value.
    """
    forward = contrastive_loss(u, v, tau)
    reverse = contrastive_loss(v, u, tau)
    return ad.mul(ad.add(forward, reverse), 0.5)


# pairing -> (term name, (modality, view) for each slot)
_PAIRINGS: dict[str, tuple[str, tuple[Modality, View], tuple[Modality, View]]] = {
    "fc": ("contr_fc", (Modality.FUNDUS, View.PLAIN), (Modality.CAROTID, View.PLAIN)),
    "fv": (
        "contr_fv",
        (Modality.FUNDUS, View.VISIT_T),
        (Modality.FUNDUS, View.VISIT_T_PRIME),
    ),
    "cv": (
        "contr_cv",
        (Modality.CAROTID, View.VISIT_T),
        (Modality.CAROTID, View.VISIT_T_PRIME),
    ),
    "eye": (
        "contr_eye",
        (Modality.FUNDUS, View.EYE_RIGHT),
        (Modality.FUNDUS, View.EYE_LEFT),
    ),
}


def instantiate_contrastive(
    pairing: str,
    batches: tuple[EmbeddingBatch, EmbeddingBatch],
    tau: float | Tensor,
) -> tuple[str, Tensor]:
    """Validate tags for one of the four pairings and return the named term."""
    if pairing not in _PAIRINGS:
        raise ContractError(f"unknown pairing {pairing!r}")
    name, want_u, want_v = _PAIRINGS[pairing]
    u, v = batches
    for slot, (batch, want) in enumerate(((u, want_u), (v, want_v))):
        if (batch.modality_tag, batch.view_tag) != want:
            raise PairingError(
                f"pairing {pairing!r} slot {slot} expects {want[0].value}/"
                f"{want[1].value}, got {batch.modality_tag.value}/"
                f"{batch.view_tag.value}"
            )
    return name, clip_loss(u, v, tau)


def prediction_mse(m: Tensor, m_hat: Tensor) -> Tensor:
    """Mean squared error over all N*P measure entries."""
    if m.shape != m_hat.shape:
        raise DimensionError(f"measure shapes differ: {m.shape} vs {m_hat.shape}")
    diff = ad.sub(m_hat, m)
    return ad.mean_all(ad.mul(diff, diff))


def reconstruction_mse(image: Tensor, decoded: Tensor) -> Tensor:
    """Mean squared error over all pixels and channels."""
    if image.shape != decoded.shape:
        raise DimensionError(
            f"image shapes differ: {image.shape} vs {decoded.shape}"
        )
    diff = ad.sub(decoded, image)
    return ad.mean_all(ad.mul(diff, diff))


def total_loss(
    report_terms: dict[str, Tensor], weights: LossWeights, step: int = 0
) -> tuple[LossReport, Tensor]:
    """Weighted sum over the terms that are present.

    Absent streams contribute no term at all; an empty term set is a
    contract violation.  Terms are summed in canonical order so the total
    is reproducible bit for bit.
    """
    if not report_terms:
        raise ContractError("total_loss needs at least one term")
    unknown = set(report_terms) - set(TERM_ORDER)
    if unknown:
        raise ContractError(f"unknown loss terms: {sorted(unknown)}")
    total: Tensor | None = None
    values: dict[str, float] = {}
    for name in TERM_ORDER:
        if name not in report_terms:
            continue
        term = report_terms[name]
        values[name] = term.item()
        weighted = ad.mul(term, weights.of(name))
        total = weighted if total is None else ad.add(total, weighted)
    report = LossReport(step=step, terms=values, total=total.item())
    return report, total
