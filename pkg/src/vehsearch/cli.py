"""Command-line entry points: synth, train, retrieve, evaluate, gradcheck, dump-masks."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .config import ConfigError, RunConfig, coerce, load_config
from .data import FrameStore, SynthConfig, TrackFormatError, generate_synthetic, load_tracks, save_tracks, split_tracks
from .metrics import DEFAULT_KS, run_evaluate
from .retrieval import Scorer, run_retrieve, sample_frames
from .text import AttributeLexicon, Vocab

log = logging.getLogger("vehsearch")


def _split_overrides(extra: Sequence[str]) -> dict[str, object]:
    """``--key value`` / ``--key=value`` pairs for any RunConfig field."""
    out: dict[str, object] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for {tok}")
            value = extra[i + 1]
            i += 1
        key = key.replace("-", "_")
        out[key] = coerce(key, value)
        i += 1
    return out


def _config(args, extra) -> RunConfig:
    overrides = _split_overrides(extra)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.output is not None:
        overrides["output"] = args.output
    return load_config(args.config, overrides)


def _lexicon(config: RunConfig) -> AttributeLexicon:
    return AttributeLexicon.load(config.lexicon) if config.lexicon else AttributeLexicon.default()


def _require(config: RunConfig, *names: str):
    missing = [n for n in names if not getattr(config, n)]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join(f"--{n}" for n in missing))


def _load_queries(path: str) -> dict[str, list[str]]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    out = {}
    for qid, entry in raw.items():
        nl = entry["nl"] if isinstance(entry, dict) else entry
        if len(nl) != 3:
            raise ConfigError(f"query {qid}: expected 3 descriptions, got {len(nl)}")
        out[qid] = list(nl)
    return out


def _load_model(config: RunConfig):
    from .train import load_model

    _require(config, "checkpoint", "vocab")
    return load_model(config, config.checkpoint), Vocab.load(config.vocab)


def cmd_synth(config: RunConfig, args) -> int:
    """Write a synthetic corpus plus its train/test split, test queries and ground truth."""
    lexicon = _lexicon(config)
    synth = SynthConfig(seed=config.seed, num_tracks=config.synth_tracks, frames_per_track=config.synth_frames,
                        image_size=config.image_size, distractors=config.synth_distractors, p_noise=config.p_noise)
    corpus = generate_synthetic(synth, lexicon)
    out = Path(config.output)
    corpus.write(out)
    train, test = split_tracks(corpus.tracks, config.seed, config.test_fraction)
    save_tracks(train, out / "train_tracks.json")
    save_tracks(test, out / "test_tracks.json")
    queries = {f"q_{t.track_id}": {"nl": list(t.nl)} for t in test}
    truth = {f"q_{t.track_id}": t.track_id for t in test}
    (out / "queries.json").write_text(json.dumps(queries, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "ground_truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "lexicon.txt").write_text(lexicon.dumps(), encoding="utf-8")
    print(f"wrote {len(corpus.tracks)} tracks ({len(train)} train / {len(test)} test) to {out}")
    return 0


def cmd_train(config: RunConfig, args) -> int:
    from .train import run_train

    _require(config, "tracks", "frames")
    tracks = load_tracks(config.tracks)
    start = time.perf_counter()
    result = run_train(config, tracks, FrameStore(config.frames), _lexicon(config), output=config.output)
    first, last = result.history[0].loss_total, result.history[-1].loss_total
    print(f"trained {config.epochs} epochs in {time.perf_counter() - start:.1f}s; "
          f"loss {first:.4f} -> {last:.4f}; checkpoint {result.checkpoint}")
    return 0


def cmd_retrieve(config: RunConfig, args) -> int:
    _require(config, "tracks", "frames", "queries")
    model, vocab = _load_model(config)
    candidates = load_tracks(config.tracks)
    result = run_retrieve(config, model, vocab, _load_queries(config.queries), candidates,
                          FrameStore(config.frames), _lexicon(config))
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    result.save_json(out / "results.json")
    if args.scores:
        result.save_scores_csv(out / "scores.csv")
    print(f"ranked {len(candidates)} tracks for {len(result.rankings)} queries -> {out / 'results.json'}")
    return 0


def cmd_evaluate(config: RunConfig, args) -> int:
    rankings = json.loads(Path(args.results).read_text(encoding="utf-8"))
    truth = json.loads(Path(args.ground_truth).read_text(encoding="utf-8"))
    ks = tuple(int(k) for k in args.k.split(",")) if args.k else DEFAULT_KS
    metrics = run_evaluate(rankings, truth, ks)
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, f"{v:.9g}"])
    for k, v in metrics.items():
        print(f"{k:<10} {v:.4f}")
    return 0


def cmd_gradcheck(config: RunConfig, args) -> int:
    from .verify import run_gradcheck

    results = run_gradcheck(config.encoder(), seed=config.seed, max_entries=args.entries)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("all modules pass" if ok else "gradient check FAILED")
    return 0 if ok else 1


def cmd_dump_masks(config: RunConfig, args) -> int:
    """Predicted masks for each track's first description on its own sampled frames."""
    from .data import preprocess, render_box_mask

    _require(config, "tracks", "frames")
    model, vocab = _load_model(config)
    scorer = Scorer(model, vocab, config)
    store = FrameStore(config.frames)
    tracks = load_tracks(config.tracks)[: args.limit]
    out = Path(config.output) / "masks"
    out.mkdir(parents=True, exist_ok=True)
    size, feat = config.image_size, config.encoder().feature_size
    for t in tracks:
        text = scorer.encode_text([t.nl[0]])
        for f in sample_frames(len(t.frames), config.frames_per_track_sample):
            image, box, _ = preprocess(store.get(t.frames[f]), t.boxes[f], False, size)
            b = render_box_mask(box, size, feat)[1]
            frames = scorer.encode_frames(image[None], b[None])
            mask = scorer.masks(text, 0, frames, np.array([0]))[0, 0]
            img = Image.fromarray(np.round(mask * 255).astype(np.uint8), mode="L").resize((size, size), Image.NEAREST)
            img.save(out / f"{t.track_id}_{f:04d}.png")
    print(f"wrote masks for {len(tracks)} tracks to {out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "retrieve": cmd_retrieve,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "dump-masks": cmd_dump_masks,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--output", help="output directory")
    parser = argparse.ArgumentParser(prog="vehsearch", description=__doc__,
                                     epilog="Any config key can also be given as --key value.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "retrieve":
            p.add_argument("--scores", action="store_true", help="also write per-pair scores.csv")
        elif name == "evaluate":
            p.add_argument("--results", required=True)
            p.add_argument("--ground-truth", required=True)
            p.add_argument("--k", help="comma-separated K list (default 1,5,10)")
        elif name == "gradcheck":
            p.add_argument("--entries", type=int, default=4, help="probed coordinates per input")
        elif name == "dump-masks":
            p.add_argument("--limit", type=int, default=10, help="number of tracks")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args, extra = build_parser().parse_known_args(argv)
    try:
        config = _config(args, extra)
        return COMMANDS[args.command](config, args)
    except (ConfigError, TrackFormatError, FileNotFoundError, KeyError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
