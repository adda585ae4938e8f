"""Track ranking: score every (query, track) pair and sort."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autodiff import tensor as T
from .autodiff.tensor import EPS
from .config import RunConfig
from .data import FrameStore, Track, preprocess, render_box_mask
from .encoders import cls_feature
from .model import RetrievalNet
from .scoring import combine
from .text import UNKNOWN, AttributeLexicon, Vocab, denoise_queries, extract_attributes, tokenize_batch


def sample_frames(n: int, k: int) -> np.ndarray:
    """Up to ``k`` uniformly spaced frame indices out of ``n``."""
    if n < 1:
        raise ValueError("track has no frames")
    return np.unique(np.round(np.linspace(0, n - 1, min(k, n))).astype(int))


@dataclass
class TextSide:
    fn: np.ndarray  # (D, l, e)
    fn_gt: np.ndarray  # (D, e)
    fi_g: np.ndarray  # (D, c)
    color_ids: np.ndarray  # (D,) argmax of the language head
    type_ids: np.ndarray


@dataclass
class FrameSide:
    fi: np.ndarray  # (F, c, h, w)
    keys: np.ndarray  # (F, e, h*w)
    box_masks: np.ndarray  # (F, 1, h, w)
    fi_gt: np.ndarray  # (F, c)
    fn_g: np.ndarray  # (F, e)
    color_probs: np.ndarray  # (F, n_colors)
    type_probs: np.ndarray


@dataclass
class PairScores:
    mpr: np.ndarray  # (D, F)
    ss: np.ndarray
    ctm: np.ndarray
    prob: np.ndarray


@dataclass
class RankingResult:
    rankings: dict[str, list[str]]
    scores: dict[str, dict[str, float]]
    breakdown: dict[str, dict[str, tuple[float, float, float]]] = field(default_factory=dict)

    def save_json(self, path: str | Path):
        import json

        Path(path).write_text(json.dumps(self.rankings, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def save_scores_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["query_id", "track_id", "rank", "mpr", "ss", "ctm", "prob"])
            for q, order in sorted(self.rankings.items()):
                for rank, t in enumerate(order, 1):
                    m, s, c = self.breakdown.get(q, {}).get(t, (float("nan"),) * 3)
                    w.writerow([q, t, rank, f"{m:.9g}", f"{s:.9g}", f"{c:.9g}", f"{self.scores[q][t]:.9g}"])


def _pairwise_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """cos between every row of ``a`` and every row of ``b``, clipped to [-1, 1]."""
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    den = np.maximum(na[:, None] * nb[None, :], EPS)
    return np.clip((a @ b.T) / den, -1.0, 1.0)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


class Scorer:
    """Frozen-model scoring with text and frame features computed once and reused across pairs."""

    def __init__(self, model: RetrievalNet, vocab: Vocab, config: RunConfig):
        self.model = model.eval()
        self.vocab = vocab
        self.config = config
        self.feature_size = config.encoder().feature_size

    def encode_text(self, descriptions: Sequence[str], color_ids=None, type_ids=None) -> TextSide:
        """Language-side features. ``color_ids``/``type_ids`` replace the head argmax where >= 0."""
        tokens = tokenize_batch(list(descriptions), self.vocab, self.config.l)
        m = self.model
        with T.no_grad():
            fn = m.text(tokens.ids, tokens.attention_mask)
            c_n, t_n = m.cls_text(cls_feature(fn))
            fn_gt = T.mean(fn, axis=1)
            fi_g = m.subst.image_from_text(fn)
        colors, types = c_n.data.argmax(-1), t_n.data.argmax(-1)
        if color_ids is not None:
            colors = np.where(np.asarray(color_ids) >= 0, color_ids, colors)
        if type_ids is not None:
            types = np.where(np.asarray(type_ids) >= 0, type_ids, types)
        return TextSide(fn.data, fn_gt.data, fi_g.data, colors, types)

    def encode_frames(self, images: np.ndarray, box_masks: np.ndarray) -> FrameSide:
        m = self.model
        parts = []
        step = max(1, self.config.score_batch // 8)
        with T.no_grad():
            for s in range(0, len(images), step):
                img, b = images[s : s + step], box_masks[s : s + step]
                fi = m.image(img)
                keys = m.fuse.attn.image_keys(fi)
                c_i, t_i, _ = m.cls_img(fi, b)
                parts.append((fi.data, keys.data, b, m.subst.text_from_image(fi, b).data,
                              _softmax(c_i.data), _softmax(t_i.data)))
        fi, keys, b, fn_g, cp, tp = (np.concatenate(x) for x in zip(*parts))
        return FrameSide(fi, keys, b, fi.mean(axis=(2, 3)), fn_g, cp, tp)

    def frames_for(self, tracks: Sequence[Track], store: FrameStore) -> tuple[FrameSide, list[tuple[int, int]]]:
        """Encode the sampled frames of every track; also returns each track's slice."""
        size = self.config.image_size
        images, masks, spans = [], [], []
        for t in tracks:
            start = len(images)
            for f in sample_frames(len(t.frames), self.config.frames_per_track_sample):
                image, box, _ = preprocess(store.get(t.frames[f]), t.boxes[f], False, size)
                images.append(image)
                masks.append(render_box_mask(box, size, self.feature_size)[1])
            spans.append((start, len(images)))
        return self.encode_frames(np.stack(images), np.stack(masks)), spans

    def masks(self, text: TextSide, d: int, frames: FrameSide, idx: np.ndarray) -> np.ndarray:
        """Predicted masks for description ``d`` against frames ``idx``: (len(idx), 1, h, w)."""
        fn = np.repeat(text.fn[d : d + 1], len(idx), axis=0)
        with T.no_grad():
            _, _, _, fm = self.model.fuse.fuse(T.as_tensor(fn), T.as_tensor(frames.fi[idx]),
                                               T.as_tensor(frames.keys[idx]))
            return self.model.fuse.mask(fm).data

    def pair_scores(self, text: TextSide, frames: FrameSide) -> PairScores:
        n_frames = len(frames.fi)
        mpr = np.empty((len(text.fn), n_frames), dtype=np.float64)
        area = frames.box_masks.sum(axis=(1, 2, 3)).astype(np.float64)
        for d in range(len(text.fn)):
            for s in range(0, n_frames, self.config.score_batch):
                idx = np.arange(s, min(n_frames, s + self.config.score_batch))
                m = self.masks(text, d, frames, idx)
                mpr[d, idx] = (m * frames.box_masks[idx]).sum(axis=(1, 2, 3)) / area[idx]
        ss = _pairwise_cosine(frames.fi_gt, text.fi_g).T + _pairwise_cosine(text.fn_gt, frames.fn_g)
        ctm = frames.color_probs[:, text.color_ids].T + frames.type_probs[:, text.type_ids].T
        return PairScores(mpr, ss, ctm, combine(mpr, ss, ctm, self.config.lambda_ctm))


def run_retrieve(config: RunConfig, model: RetrievalNet, vocab: Vocab, queries: Mapping[str, Sequence[str]],
                 candidates: Sequence[Track], store: FrameStore,
                 lexicon: AttributeLexicon | None = None) -> RankingResult:
    """Rank every candidate track for every query (three descriptions each).

    A track's score is the mean Prob over the query's descriptions and the
    track's sampled frames; ties are broken by track id.
    """
    if not candidates:
        raise ValueError("empty candidate set")
    lexicon = lexicon or AttributeLexicon.default()
    scorer = Scorer(model, vocab, config)
    frames, spans = scorer.frames_for(candidates, store)

    qids = list(queries)
    texts, colors, types = [], [], []
    for q in qids:
        descs = list(queries[q])
        if len(descs) != 3:
            raise ValueError(f"query {q}: expected 3 descriptions, got {len(descs)}")
        attrs, rewritten = denoise_queries(descs, lexicon)
        if config.denoise:
            descs = rewritten
            colors += [attrs.color_id] * 3
            types += [attrs.type_id] * 3
        else:
            for c, t in (extract_attributes(d, lexicon) for d in descs):
                colors.append(UNKNOWN if c is None else c)
                types.append(UNKNOWN if t is None else t)
        texts.extend(descs)
    if config.ctm_source == "lexicon":
        text = scorer.encode_text(texts, colors, types)
    else:
        text = scorer.encode_text(texts)
    scores = scorer.pair_scores(text, frames)

    result = RankingResult({}, {}, {})
    for qi, q in enumerate(qids):
        rows = slice(3 * qi, 3 * qi + 3)
        per_track, breakdown = {}, {}
        for t, (a, b) in zip(candidates, spans):
            block = (slice(None), slice(a, b))
            per_track[t.track_id] = float(scores.prob[rows][block].mean())
            breakdown[t.track_id] = tuple(float(x[rows][block].mean()) for x in (scores.mpr, scores.ss, scores.ctm))
        result.rankings[q] = sorted(per_track, key=lambda tid: (-per_track[tid], tid))
        result.scores[q] = per_track
        result.breakdown[q] = breakdown
    return result
