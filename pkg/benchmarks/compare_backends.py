"""Benchmark the numba kernels against the pure-numpy fallbacks.

Times the three attention kernels in isolation and a full rerank pass with
each kernel set patched in. Run:

    python benchmarks/compare_backends.py [--length 384] [--repeats 20]

The active default backend follows EMBRANK_BACKEND (numba when available).
"""

from __future__ import annotations

import argparse
import statistics
import time

import embrank.lm as lm_mod
from embrank.decoding import WindowSchedule, sliding_window_rerank
from embrank.kernels import NUMBA_IMPLS, NUMPY_IMPLS, active_backend
from embrank.lm import DecoderLm, LmConfig
from embrank.numerics import make_rng
from embrank.projector import Projector
from embrank.retrieval import HashEncoder
from embrank.synthetic import SyntheticSpec, generate


def time_call(fn, repeats: int) -> float:
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def bench_kernels(length: int, d: int, heads: int, repeats: int) -> None:
    rng = make_rng(0)
    q, k, v = (rng.standard_normal((length, d)) for _ in range(3))
    dout = rng.standard_normal((length, d))
    qv = rng.standard_normal(d)

    impl_sets = {"numpy": NUMPY_IMPLS}
    if NUMBA_IMPLS is not None:
        impl_sets["numba"] = NUMBA_IMPLS
        # trigger JIT compilation outside the timed region
        NUMBA_IMPLS["mha_forward"](q[:4], k[:4], v[:4], heads)
        _, w4 = NUMPY_IMPLS["mha_forward"](q[:4], k[:4], v[:4], heads)
        NUMBA_IMPLS["mha_backward"](dout[:4], q[:4], k[:4], v[:4], w4, heads)
        NUMBA_IMPLS["step_attention"](qv, k[:4], v[:4], heads)

    print(f"attention kernels: length={length} d={d} heads={heads} (median of {repeats})")
    results: dict[str, dict[str, float]] = {}
    for name, impls in impl_sets.items():
        _, attw = impls["mha_forward"](q, k, v, heads)
        results[name] = {
            "forward": time_call(lambda: impls["mha_forward"](q, k, v, heads), repeats),
            "backward": time_call(
                lambda: impls["mha_backward"](dout, q, k, v, attw, heads), repeats
            ),
            "step": time_call(lambda: impls["step_attention"](qv, k, v, heads), repeats),
        }
    for kernel in ("forward", "backward", "step"):
        line = f"  {kernel:8s}"
        for name in impl_sets:
            line += f"  {name}={results[name][kernel] * 1e3:8.3f}ms"
        if "numba" in results:
            ratio = results["numpy"][kernel] / max(results["numba"][kernel], 1e-12)
            line += f"  speedup={ratio:5.2f}x"
        print(line)


def bench_rerank(repeats: int) -> None:
    passages, queries, _ = generate(SyntheticSpec(n_passages=60, n_queries=4, seed=0))
    encoder = HashEncoder(dim=64, vocab_hash_size=4096, seed=0)
    lm = DecoderLm(LmConfig(max_seq=512), seed=0)
    projector = Projector(d_enc=64, d_lm=64, seed=0)
    embeddings = encoder.encode_batch([p.text for p in passages[:40]])
    schedule = WindowSchedule(n=40, w=20, s=10)
    query = queries[0].text

    impl_sets = {"numpy": NUMPY_IMPLS}
    if NUMBA_IMPLS is not None:
        impl_sets["numba"] = NUMBA_IMPLS

    print(f"end-to-end rerank: n=40 w=20 s=10 (median of {repeats})")
    originals = (lm_mod.causal_mha_forward, lm_mod.causal_mha_backward, lm_mod.step_attention)
    try:
        for name, impls in impl_sets.items():
            lm_mod.causal_mha_forward = impls["mha_forward"]
            lm_mod.causal_mha_backward = impls["mha_backward"]
            lm_mod.step_attention = impls["step_attention"]
            sliding_window_rerank(lm, projector, query, embeddings, schedule)  # warmup
            elapsed = time_call(
                lambda: sliding_window_rerank(lm, projector, query, embeddings, schedule),
                repeats,
            )
            print(f"  {name}: {elapsed * 1e3:8.2f}ms per query")
    finally:
        lm_mod.causal_mha_forward, lm_mod.causal_mha_backward, lm_mod.step_attention = originals


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--length", type=int, default=384)
    parser.add_argument("--d", type=int, default=64)
    parser.add_argument("--heads", type=int, default=2)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()
    print(f"default backend for this process: {active_backend()}")
    bench_kernels(args.length, args.d, args.heads, args.repeats)
    bench_rerank(max(5, args.repeats // 2))


if __name__ == "__main__":
    main()
