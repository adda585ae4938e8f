"""Finite-difference checks of every module chain at working dimensions."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import tensor as T
from .autodiff.gradcheck import grad_check
from .autodiff.tensor import Tensor
from .encoders import EncoderConfig, ImageEncoder, TextEncoder, cls_feature
from .fusion import Fusion
from .heads import NUM_COLORS, NUM_TYPES, FuturePredictor, ImageClassifier, Substitution, SubstitutionBundle, TextClassifier
from .scoring import ClassLogits, combine, compute_losses, ctm, mpr, ss

TOLERANCE = 1e-3
BATCH = 2

# A builder returns the scalar closure and the tensors whose gradients are probed.
Builder = Callable[[EncoderConfig, np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _leaf(rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, dtype=np.float64)


def _box(cfg: EncoderConfig) -> np.ndarray:
    s = cfg.feature_size
    b = np.zeros((BATCH, 1, s, s))
    b[0, 0, 2:6, 3:8] = 1.0
    b[1, 0, s // 2 :, : s // 2] = 1.0
    return b


def _weighted_sum(outputs, weights) -> Tensor:
    total = None
    for out, w in zip(outputs, weights):
        term = T.tsum(out * Tensor(w, dtype=np.float64))
        total = term if total is None else total + term
    return total


def build_text(cfg, rng):
    enc = TextEncoder(cfg, rng).astype(np.float64)
    ids = rng.integers(3, cfg.vocab_size, size=(BATCH, cfg.l))
    ids[:, 0] = 1
    attention = np.ones((BATCH, cfg.l))
    attention[1, cfg.l // 2 :] = 0
    ids[1, cfg.l // 2 :] = 0
    w = rng.normal(size=(BATCH, cfg.l, cfg.e))

    def f():
        return _weighted_sum([enc(ids, attention)], [w])

    return f, enc.parameters()


def build_image(cfg, rng):
    enc = ImageEncoder(cfg, rng).astype(np.float64)
    images = _leaf(rng, (BATCH, 3, cfg.image_size, cfg.image_size), 0.5)
    s = cfg.feature_size
    w = rng.normal(size=(BATCH, cfg.c, s, s))

    def f():
        return _weighted_sum([enc(images)], [w])

    return f, enc.parameters() + [images]


def build_aux_heads(cfg, rng):
    s = cfg.feature_size
    heads = [TextClassifier(cfg.e, rng), ImageClassifier(cfg.c, rng), Substitution(cfg.e, cfg.c, rng),
             FuturePredictor(cfg.c, rng)]
    for h in heads:
        h.astype(np.float64)
    text_cls, img_cls, subst, future = heads
    fn = _leaf(rng, (BATCH, cfg.l, cfg.e))
    fi = _leaf(rng, (BATCH, cfg.c, s, s))
    b = _box(cfg)
    shapes = [(BATCH, NUM_COLORS), (BATCH, NUM_TYPES), (BATCH, NUM_COLORS), (BATCH, NUM_TYPES), (BATCH, cfg.c),
              (BATCH, cfg.c), (BATCH, cfg.e), (BATCH, cfg.c), (BATCH, cfg.e), (BATCH, 3, s, s)]
    weights = [rng.normal(size=sh) for sh in shapes]

    def f():
        c_n, t_n = text_cls(cls_feature(fn))
        c_i, t_i, pooled = img_cls(fi, b)
        bundle = subst(fn, fi, b)
        outs = [c_n, t_n, c_i, t_i, pooled, bundle.fi_gt, bundle.fn_gt, bundle.fi_g, bundle.fn_g, future(fi)]
        return _weighted_sum(outs, weights)

    params = [p for h in heads for p in h.parameters()]
    return f, params + [fn, fi]


def build_fusion(cfg, rng):
    s = cfg.feature_size
    fusion = Fusion(cfg.e, cfg.c, cfg.mask_width, rng).astype(np.float64)
    fn = _leaf(rng, (BATCH, cfg.l, cfg.e), 0.3)
    fi = _leaf(rng, (BATCH, cfg.c, s, s), 0.3)
    w = [rng.normal(size=(BATCH, cfg.l, s * s)), rng.normal(size=(BATCH, 1, s, s))]

    def f():
        a, _, _, fm = fusion.fuse(fn, fi)
        return _weighted_sum([a, fusion.mask(fm)], w)

    return f, fusion.parameters() + [fn, fi]


def build_scoring_loss(cfg, rng):
    s = cfg.feature_size
    m_logits = _leaf(rng, (BATCH, 1, s, s))
    c_i, t_i = _leaf(rng, (BATCH, NUM_COLORS)), _leaf(rng, (BATCH, NUM_TYPES))
    c_n, t_n = _leaf(rng, (BATCH, NUM_COLORS)), _leaf(rng, (BATCH, NUM_TYPES))
    # the substitution targets are constants of the loss, so they are not probed
    targets = [Tensor(rng.normal(size=(BATCH, cfg.c)), dtype=np.float64),
               Tensor(rng.normal(size=(BATCH, cfg.e)), dtype=np.float64)]
    generated = [_leaf(rng, (BATCH, cfg.c)), _leaf(rng, (BATCH, cfg.e))]
    future = _leaf(rng, (BATCH, 3, s, s))
    next_frame = rng.uniform(size=(BATCH, 3, s, s))
    b = _box(cfg)
    colors = np.array([3, 7])
    types = np.array([1, 9])

    def f():
        m = T.clamp_probability(T.sigmoid(m_logits))
        bundle = SubstitutionBundle(*targets, *generated)
        logits = ClassLogits(c_n, t_n, c_i, t_i)
        total, _ = compute_losses(m, b, logits, colors, types, bundle, future, next_frame)
        prob = combine(mpr(m, b), ss(bundle), ctm(c_i, t_i, colors, types))
        return total + T.tsum(prob)

    return f, [m_logits, c_i, t_i, c_n, t_n, *generated, future]


REGISTRY: dict[str, Builder] = {
    "encoders.text": build_text,
    "encoders.image": build_image,
    "aux_heads": build_aux_heads,
    "fusion": build_fusion,
    "scoring_loss": build_scoring_loss,
}


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    seconds: float
    probes: int = 0
    refined: int = 0  # probes whose step was shrunk to avoid straddling a kink

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error)) and self.max_error < TOLERANCE

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"{self.name:<16} max_rel_err={self.max_error:.3e}  probes={self.probes:<4d} "
                f"refined={self.refined:<3d} {self.seconds:6.2f}s  {status}")


def run_gradcheck(config: EncoderConfig, seed: int = 0, max_entries: int = 4,
                  registry: dict[str, Builder] | None = None) -> list[CheckResult]:
    """One result per registered module; every input tensor is probed at ``max_entries`` coordinates."""
    results = []
    for name, builder in (registry or REGISTRY).items():
        rng = np.random.default_rng(seed)
        start = time.perf_counter()
        f, inputs = builder(config, rng)
        stats: dict = {}
        err = grad_check(f, inputs, h=1e-3, max_entries=max_entries, rng=rng, stats=stats)
        results.append(CheckResult(name, err, time.perf_counter() - start, stats["probes"], stats["refined"]))
    return results
