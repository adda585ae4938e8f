"""Description-frame matching probability and the four-part training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import tensor as T
from .autodiff.tensor import Tensor
from .heads import SubstitutionBundle

LAMBDA_CTM = 0.5
LAMBDA_CLS = 0.2
LAMBDA_FUT = 0.2
LABEL_SMOOTHING = 0.1


@dataclass
class ClassLogits:
    c_n: Tensor
    t_n: Tensor
    c_i: Tensor
    t_i: Tensor


@dataclass(frozen=True)
class MatchScore:
    mpr: float
    ss: float
    ctm: float
    prob: float
    lambda_ctm: float = LAMBDA_CTM


@dataclass(frozen=True)
class LossReport:
    l_seg: float
    l_cls: float
    l_sub: float
    l_fut: float
    l_total: float
    lambda1: float = LAMBDA_CLS
    lambda2: float = LAMBDA_FUT
    missing_next: int = 0


def mpr(m, b) -> Tensor:
    """Mean predicted mask inside the box, per sample: (N, 1, h, w) x2 -> (N,)."""
    b = T.as_tensor(b)
    area = b.data.sum(axis=(1, 2, 3))
    if np.any(area <= 0):
        raise ValueError("empty candidate box")
    return T.tsum(m * b, axis=(1, 2, 3)) * Tensor(1.0 / area, dtype=b.data.dtype)


def ss(bundle: SubstitutionBundle) -> Tensor:
    return T.cosine_similarity(bundle.fi_gt, bundle.fi_g) + T.cosine_similarity(bundle.fn_gt, bundle.fn_g)


def ctm(c_i, t_i, color_ids, type_ids) -> Tensor:
    """softmax(C_i)[color] + softmax(T_i)[type], per sample."""
    c_i, t_i = T.as_tensor(c_i), T.as_tensor(t_i)
    color_ids = np.asarray(color_ids, dtype=np.int64).reshape(-1)
    type_ids = np.asarray(type_ids, dtype=np.int64).reshape(-1)
    for ids, logits, what in ((color_ids, c_i, "color"), (type_ids, t_i, "type")):
        if ids.min(initial=0) < 0 or ids.max(initial=0) >= logits.shape[-1]:
            raise IndexError(f"{what} index outside [0, {logits.shape[-1]})")
    rows = np.arange(c_i.shape[0])
    return T.softmax(c_i, axis=-1)[rows, color_ids] + T.softmax(t_i, axis=-1)[rows, type_ids]


def combine(mpr_value, ss_value, ctm_value, lambda_ctm: float = LAMBDA_CTM):
    """Prob = MPR + SS + lambda * CTM. Works on floats, arrays and tensors."""
    return mpr_value + ss_value + lambda_ctm * ctm_value


def match_probability(m, b, bundle: SubstitutionBundle, logits: ClassLogits,
                      lambda_ctm: float = LAMBDA_CTM, color_ids=None, type_ids=None) -> list[MatchScore]:
    """Per-sample score records.

    The language-side attributes default to the argmax of the text
    classifier; pass ``color_ids``/``type_ids`` to use lexicon attributes.
    """
    if color_ids is None:
        color_ids = logits.c_n.data.argmax(axis=-1)
    if type_ids is None:
        type_ids = logits.t_n.data.argmax(axis=-1)
    with T.no_grad():
        p = mpr(m, b).data
        s = ss(bundle).data
        c = ctm(logits.c_i, logits.t_i, color_ids, type_ids).data
    return [MatchScore(float(a), float(x), float(y), float(combine(a, x, y, lambda_ctm)), lambda_ctm)
            for a, x, y in zip(p, s, c)]


def _known_rows_ce(logits: Tensor, labels: np.ndarray, smoothing: float) -> Tensor | None:
    keep = np.flatnonzero(labels >= 0)
    if keep.size == 0:
        return None
    if keep.size < labels.size:
        logits = logits[keep]
    return T.cross_entropy(logits, labels[keep], smoothing)


def compute_losses(m, b, logits: ClassLogits, color_labels, type_labels, bundle: SubstitutionBundle,
                   future, next_frame, has_next=None, lambda1: float = LAMBDA_CLS,
                   lambda2: float = LAMBDA_FUT, smoothing: float = LABEL_SMOOTHING,
                   sub_loss: str = "corrected", seg_loss: str = "bce") -> tuple[Tensor, LossReport]:
    """Batch-mean losses. Returns the differentiable total and a float report.

    ``color_labels``/``type_labels`` hold -1 where a track's attribute is
    unknown; those rows are left out of the classification term. Samples
    with ``has_next`` false contribute zero future loss.
    """
    b = T.as_tensor(b)
    if seg_loss == "bce":
        l_seg = T.binary_cross_entropy(m, b)
    elif seg_loss == "paper_literal":
        l_seg = T.binary_cross_entropy(m, b, positive_only=True)
    else:
        raise ValueError(f"unknown seg_loss {seg_loss!r}")

    color_labels = np.asarray(color_labels, dtype=np.int64).reshape(-1)
    type_labels = np.asarray(type_labels, dtype=np.int64).reshape(-1)
    terms = [
        _known_rows_ce(logits.c_n, color_labels, smoothing),
        _known_rows_ce(logits.c_i, color_labels, smoothing),
        _known_rows_ce(logits.t_n, type_labels, smoothing),
        _known_rows_ce(logits.t_i, type_labels, smoothing),
    ]
    terms = [t for t in terms if t is not None]
    l_cls = terms[0] if terms else Tensor(0.0)
    for t in terms[1:]:
        l_cls = l_cls + t

    cs_img = T.cosine_similarity(bundle.fi_gt.detach(), bundle.fi_g)
    cs_txt = T.cosine_similarity(bundle.fn_gt.detach(), bundle.fn_g)
    if sub_loss == "corrected":
        l_sub = T.mean(2.0 - cs_img - cs_txt)
    elif sub_loss == "paper_literal":
        l_sub = T.mean(2.0 - cs_img + cs_txt)
    else:
        raise ValueError(f"unknown sub_loss {sub_loss!r}")

    n = future.shape[0]
    has_next = np.ones(n, dtype=bool) if has_next is None else np.asarray(has_next, dtype=bool)
    per_sample = T.mse(future, T.as_tensor(next_frame), reduction="none")
    weight = Tensor(has_next.astype(np.float32), dtype=per_sample.data.dtype)
    l_fut = T.mean(per_sample * weight)

    total = l_seg + lambda1 * l_cls + l_sub + lambda2 * l_fut
    parts = [float(x.item()) for x in (l_seg, l_cls, l_sub, l_fut)]
    report = LossReport(
        l_seg=parts[0], l_cls=parts[1], l_sub=parts[2], l_fut=parts[3],
        l_total=parts[0] + lambda1 * parts[1] + parts[2] + lambda2 * parts[3],
        lambda1=lambda1, lambda2=lambda2, missing_next=int((~has_next).sum()),
    )
    return total, report
