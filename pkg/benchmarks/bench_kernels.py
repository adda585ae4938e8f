"""Compiled vs NumPy convolution kernels.

Times im2col/col2im at the shapes the desk model uses, then one full
training step with each backend swapped in.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from vehsearch.autodiff import _kernels_py, kernels

try:
    from vehsearch.autodiff import _kernels as _ext
except ImportError:  # extension not built
    _ext = None

SHAPES = [
    # (name, input shape, kernel, stride, padding)
    ("stem 96->48", (8, 3, 96, 96), 3, 2, 1),
    ("stride 48->24", (8, 16, 48, 48), 3, 2, 1),
    ("residual 12x12", (8, 64, 12, 12), 3, 1, 1),
    ("mask head 12x12", (8, 32, 12, 12), 3, 1, 1),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'shape':<18}{'op':<8}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for name, shape, k, s, p in SHAPES:
        x = rng.normal(size=shape).astype(np.float32)
        cols = _kernels_py.im2col(x, k, k, s, p)
        for op, py_fn, ext_fn in (
            ("im2col", lambda: _kernels_py.im2col(x, k, k, s, p), lambda: _ext.im2col(x, k, k, s, p)),
            ("col2im", lambda: _kernels_py.col2im(cols, shape, k, k, s, p),
             lambda: _ext.col2im(cols, shape, k, k, s, p)),
        ):
            t_py = best_of(py_fn, repeat)
            if _ext is None:
                print(f"{name:<18}{op:<8}{t_py * 1e3:>10.3f}{'n/a':>11}")
                continue
            t_ext = best_of(ext_fn, repeat)
            print(f"{name:<18}{op:<8}{t_py * 1e3:>10.3f}{t_ext * 1e3:>11.3f}{t_py / t_ext:>8.2f}x")


def bench_train_step(repeat):
    from vehsearch.config import RunConfig
    from vehsearch.data import SynthConfig, generate_synthetic
    from vehsearch.train import build_vocab, make_batch, prepare_tracks, train_step
    from vehsearch.autodiff.optim import Adam
    from vehsearch.model import RetrievalNet
    from vehsearch.text import AttributeLexicon

    cfg = RunConfig()
    corpus = generate_synthetic(SynthConfig(seed=0, num_tracks=8, frames_per_track=2))
    lex = AttributeLexicon.default()
    prepared = prepare_tracks(corpus.tracks, lex)
    vocab = build_vocab([d for p in prepared for d in p.descriptions], lex, cfg.vocab_size)
    batch = make_batch([(p, 0, 0) for p in prepared], corpus.store(), vocab, cfg, False)
    backends = [("numpy", _kernels_py)] + ([("cython", _ext)] if _ext is not None else [])
    results = {}
    saved = kernels.im2col, kernels.col2im
    try:
        for name, mod in backends:
            kernels.im2col, kernels.col2im = mod.im2col, mod.col2im
            model = RetrievalNet(cfg.encoder(), seed=0)
            opt = Adam(model.parameters(), lr=1e-3)
            results[name] = best_of(lambda: train_step(model, batch, cfg, opt), repeat)
    finally:
        kernels.im2col, kernels.col2im = saved
    line = "  ".join(f"{k} {v * 1e3:.1f} ms" for k, v in results.items())
    if len(results) == 2:
        line += f"  speedup {results['numpy'] / results['cython']:.2f}x"
    print(f"\ntrain step, batch {len(prepared)}: {line}")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    print(f"active backend: {kernels.BACKEND}\n")
    bench_kernels(args.repeat)
    bench_train_step(max(1, args.repeat // 2))


if __name__ == "__main__":
    main()
