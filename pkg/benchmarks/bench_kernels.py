#!/usr/bin/env python3
"""Benchmark the compiled kernels against the NumPy reference backend.

Times the fused loss/gradient kernels across minibatch sizes, then a
full federated round via each backend. Run from the repo root:

    python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from fedsim import kernels
from fedsim.data import gen_blobs, split_public_private, stratified_split
from fedsim.federation import FedConfig, run_ffm
from fedsim.models import Mlp
from fedsim.seeding import derive_seed


def time_call(fn, *args, repeats=2000):
    fn(*args)  # warm up
    start = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - start) / repeats


def bench_kernels():
    rng = np.random.default_rng(0)
    print(f"{'kernel':<10} {'batch':>5}", end="")
    names = kernels.available_backends()
    for name in names:
        print(f" {name + ' us':>14}", end="")
    if len(names) == 2:
        print(f" {'speedup':>8}", end="")
    print()
    for batch in (4, 16, 64, 256):
        d, c, h = 16, 4, 32
        X = rng.normal(size=(batch, d))
        y = rng.integers(0, c, batch).astype(np.int64)
        W = rng.normal(size=(c, d)); b = rng.normal(size=c)
        W1 = rng.normal(size=(h, d)); b1 = rng.normal(size=h)
        W2 = rng.normal(size=(c, h)); b2 = rng.normal(size=c)
        for label, args in (
            ("logistic", ("logistic_loss_grad", (W, b, X, y))),
            ("mlp", ("mlp_loss_grad", (W1, b1, W2, b2, X, y))),
        ):
            fn_name, fn_args = args
            times = {}
            for name in names:
                fn = getattr(kernels.get(name), fn_name)
                times[name] = time_call(fn, *fn_args)
            row = f"{label:<10} {batch:>5}"
            for name in names:
                row += f" {times[name] * 1e6:>14.2f}"
            if len(names) == 2:
                row += f" {times['reference'] / times['native']:>7.2f}x"
            print(row)


def bench_round():
    ds = gen_blobs(classes=4, per_class=500, d=16, separation=4.0,
                   noise_sd=1.0, seed=0)
    test, train = stratified_split(ds, 0.25, derive_seed(0, "test-split"))
    plan = split_public_private(train, 10, "dirichlet", alpha=0.5,
                                seed=derive_seed(0, "partition"))
    spec = Mlp(d=16, hidden=32, classes=4)
    cfg = FedConfig(mode="ffm", rounds=10, local_epochs=5, local_lr=0.03,
                    batch_size=32, server_epochs=1)
    print("\nfull run (10 rounds x 10 clients x 5 epochs, mlp h=32):")
    current = kernels.active_backend()
    try:
        for name in kernels.available_backends():
            kernels.set_backend(name)
            start = time.perf_counter()
            run_ffm(cfg, plan, spec, test, seed=0)
            print(f"  {name:<10} {time.perf_counter() - start:.3f}s")
    finally:
        kernels.set_backend(current)


if __name__ == "__main__":
    print(f"available backends: {kernels.available_backends()}")
    print(f"active backend: {kernels.active_backend()}\n")
    bench_kernels()
    bench_round()
