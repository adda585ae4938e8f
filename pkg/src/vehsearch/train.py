"""Training loop: per-epoch sampling, batching, optimisation, checkpoints and the loss log."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import checkpoint
from .autodiff import tensor as T
from .autodiff.optim import Adam, step_lr
from .config import RunConfig
from .data import FrameStore, Track, preprocess, render_box_mask, resize_image, translate
from .model import RetrievalNet
from .scoring import LossReport, compute_losses
from .text import UNKNOWN, AttributeLexicon, TrackAttributes, Vocab, denoise_queries, tokenize_batch

log = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "lr", "loss_total", "loss_seg", "loss_cls", "loss_sub", "loss_fut")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class PreparedTrack:
    track: Track
    attrs: TrackAttributes
    descriptions: list[str]  # after denoising


def prepare_tracks(tracks: Sequence[Track], lexicon: AttributeLexicon, denoise: bool = True) -> list[PreparedTrack]:
    out = []
    for t in tracks:
        attrs, rewritten = denoise_queries(t.nl, lexicon)
        out.append(PreparedTrack(t, attrs, rewritten if denoise else list(t.nl)))
    return out


def build_vocab(descriptions: Sequence[str], lexicon: AttributeLexicon, size: int) -> Vocab:
    """Vocabulary over the training descriptions plus every lexicon word."""
    extra = [w for family in ("colors", "types") for phrase in lexicon.phrases(family) for w in phrase]
    vocab = Vocab.build(descriptions, extra=extra)
    if len(vocab) > size:
        raise ValueError(f"vocabulary has {len(vocab)} entries but vocab_size is {size}")
    return vocab


@dataclass
class Batch:
    track_ids: list[str]
    ids: np.ndarray
    attention_mask: np.ndarray
    images: np.ndarray  # (N, 3, S, S)
    box_masks: np.ndarray  # (N, 1, h, w)
    colors: np.ndarray
    types: np.ndarray
    next_frames: np.ndarray  # (N, 3, h, w)
    has_next: np.ndarray


def make_batch(items: Sequence[tuple[PreparedTrack, int, int]], store: FrameStore, vocab: Vocab,
               config: RunConfig, training: bool, rng: np.random.Generator | None = None) -> Batch:
    """Assemble (track, description index, frame index) triples into model inputs.

    The next frame is shifted by the same translation as the current one
    and resized to feature resolution.
    """
    size, feat = config.image_size, config.encoder().feature_size
    images, boxes, nexts, has_next = [], [], [], []
    for p, _, f in items:
        raw = store.get(p.track.frames[f])
        image, box, (dx, dy) = preprocess(raw, p.track.boxes[f], training, size, rng)
        images.append(image)
        boxes.append(render_box_mask(box, size, feat)[1])
        if f + 1 < len(p.track.frames):
            nxt = resize_image(store.get(p.track.frames[f + 1]), size)
            if dx or dy:
                nxt = translate(nxt, box, dx, dy)[0]
            nexts.append(resize_image(nxt, feat))
            has_next.append(True)
        else:
            nexts.append(np.zeros((3, feat, feat), dtype=np.float32))
            has_next.append(False)
    tokens = tokenize_batch([p.descriptions[d] for p, d, _ in items], vocab, config.l)
    return Batch(
        track_ids=[p.track.track_id for p, _, _ in items],
        ids=tokens.ids,
        attention_mask=tokens.attention_mask,
        images=np.stack(images),
        box_masks=np.stack(boxes),
        colors=np.array([p.attrs.color_id for p, _, _ in items], dtype=np.int64),
        types=np.array([p.attrs.type_id for p, _, _ in items], dtype=np.int64),
        next_frames=np.stack(nexts),
        has_next=np.array(has_next),
    )


def train_step(model: RetrievalNet, batch: Batch, config: RunConfig, optimizer: Adam | None = None):
    out = model(batch.ids, batch.attention_mask, batch.images, batch.box_masks)
    total, report = compute_losses(
        out.mask, batch.box_masks, out.logits, batch.colors, batch.types, out.bundle, out.future,
        batch.next_frames, batch.has_next, lambda1=config.lambda1, lambda2=config.lambda2,
        smoothing=config.label_smoothing, sub_loss=config.sub_loss, seg_loss=config.seg_loss,
    )
    if not math.isfinite(report.l_total):
        raise NonFiniteLossError(f"non-finite loss {report} in batch with tracks {batch.track_ids}")
    if optimizer is not None:
        T.backward(total)
        optimizer.step()
    return report


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss_total: float
    loss_seg: float
    loss_cls: float
    loss_sub: float
    loss_fut: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [f"{v:.8g}" for v in (self.lr, self.loss_total, self.loss_seg,
                                                        self.loss_cls, self.loss_sub, self.loss_fut)]


@dataclass
class TrainResult:
    model: RetrievalNet
    vocab: Vocab
    history: list[EpochLog]
    checkpoint: Path | None


def _mean_report(reports: list[tuple[LossReport, int]]) -> dict[str, float]:
    n = sum(k for _, k in reports)
    keys = ("l_total", "l_seg", "l_cls", "l_sub", "l_fut")
    return {key: sum(getattr(r, key) * k for r, k in reports) / n for key in keys}


def run_train(config: RunConfig, tracks: Sequence[Track], store: FrameStore,
              lexicon: AttributeLexicon | None = None, output: str | Path | None = None) -> TrainResult:
    """Train on ``tracks``; with ``output`` set, write checkpoints, vocab, lexicon and the loss CSV there."""
    if not tracks:
        raise ValueError("no training tracks")
    lexicon = lexicon or AttributeLexicon.default()
    prepared = prepare_tracks(tracks, lexicon, config.denoise)
    unknown = sum(p.attrs.color_id == UNKNOWN or p.attrs.type_id == UNKNOWN for p in prepared)
    if unknown:
        log.warning("%d tracks have an attribute no description names", unknown)
    vocab = build_vocab([d for p in prepared for d in p.descriptions], lexicon, config.vocab_size)

    model = RetrievalNet(config.encoder(), seed=config.seed)
    names, params = zip(*model.named_parameters())
    optimizer = Adam(list(params), lr=config.lr, weight_decay=config.weight_decay, names=list(names))
    rng = np.random.default_rng([config.seed, 1])

    out_dir = ckpt_path = None
    if output is not None:
        out_dir = Path(output)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        vocab.save(out_dir / "vocab.txt")
        (out_dir / "lexicon.txt").write_text(lexicon.dumps(), encoding="utf-8")
        (out_dir / "config.txt").write_text(config.dumps(), encoding="utf-8")
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            csv.writer(fh).writerow(CSV_HEADER)

    history = []
    model.train()
    for epoch in range(config.epochs):
        optimizer.lr = step_lr(config.lr, epoch, config.lr_drop_epochs)
        order = rng.permutation(len(prepared))
        items = [(prepared[i], int(rng.integers(3)), int(rng.integers(len(prepared[i].track.frames))))
                 for i in order]
        reports = []
        for start in range(0, len(items), config.batch_size):
            chunk = items[start : start + config.batch_size]
            batch = make_batch(chunk, store, vocab, config, training=True, rng=rng)
            reports.append((train_step(model, batch, config, optimizer), len(chunk)))
        means = _mean_report(reports)
        entry = EpochLog(epoch + 1, optimizer.lr, means["l_total"], means["l_seg"], means["l_cls"],
                         means["l_sub"], means["l_fut"])
        history.append(entry)
        log.info("epoch %d lr %.2e loss %.4f (seg %.4f cls %.4f sub %.4f fut %.4f)", entry.epoch, entry.lr,
                 entry.loss_total, entry.loss_seg, entry.loss_cls, entry.loss_sub, entry.loss_fut)
        if out_dir is not None:
            with open(out_dir / "metrics.csv", "a", newline="") as fh:
                csv.writer(fh).writerow(entry.row())
            state = model.state_dict()
            checkpoint.save(out_dir / "checkpoints" / f"epoch_{epoch + 1:03d}.sbnt", state)
            ckpt_path = out_dir / "model.sbnt"
            checkpoint.save(ckpt_path, state)
    model.eval()
    return TrainResult(model, vocab, history, ckpt_path)


def load_model(config: RunConfig, path: str | Path) -> RetrievalNet:
    model = RetrievalNet(config.encoder(), seed=config.seed)
    model.load_state_dict(checkpoint.load(path))
    return model.eval()
