"""Time the compiled-loop kernels against their numpy twins.

    python benchmarks/bench_kernels.py            # kernel micro-benchmarks
    python benchmarks/bench_kernels.py --e2e      # plus pretrain steps under SWBT_NUMBA=0 and =1

Kernel timings call both implementations directly in one process, so the
``SWBT_NUMBA`` flag does not matter for them; the end-to-end section runs
a child process per flag value because the flag is read at import.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from swbt import _accel, envsim, scoring
from swbt.numcore import kernels as K


def best_of(fn, repeat=5, number=3):
    fn()  # warm-up, also triggers compilation
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        for _ in range(number):
            fn()
        times.append((time.perf_counter() - t) / number)
    return min(times)


def kernel_cases(dtype):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(64 * 24, 64)).astype(dtype)
    g = rng.normal(size=x.shape).astype(dtype)
    gamma, beta = np.ones(64, dtype), np.zeros(64, dtype)
    att = rng.normal(size=(64 * 4 * 24, 24)).astype(dtype)
    h = rng.normal(size=(64, 24, 256)).astype(dtype)
    y_ln = K.NUMPY_KERNELS["layernorm_fwd"](x, gamma, beta, 1e-5)
    y_sm = K.NUMPY_KERNELS["softmax_fwd"](att)
    _, th = K.NUMPY_KERNELS["gelu_fwd"](h)
    return {
        "layernorm_fwd": (x, gamma, beta, 1e-5),
        "layernorm_bwd": (g, y_ln[1], y_ln[2], gamma),
        "softmax_fwd": (att,),
        "softmax_bwd": (rng.normal(size=att.shape).astype(dtype), y_sm),
        "gelu_fwd": (h,),
        "gelu_bwd": (rng.normal(size=h.shape).astype(dtype), h, th),
    }


def bench_kernels(dtype):
    rows = []
    for name, args in kernel_cases(dtype).items():
        t_loop = best_of(lambda: K.LOOP_KERNELS[name](*args))
        t_np = best_of(lambda: K.NUMPY_KERNELS[name](*args))
        rows.append((name, t_loop, t_np))
    rng = np.random.default_rng(1)
    agent, obj, goal = rng.random((200, 2)), rng.random((200, 2)), rng.random((200, 2))
    out = np.zeros((200,) + envsim.OBS_SHAPE)
    rows.append(("render x200", best_of(lambda: envsim._render_loop(agent, obj, goal, out.copy())),
                 best_of(lambda: envsim._render_numpy(agent, obj, goal, out.copy()))))
    f_imp, f_exp = rng.normal(size=(600, 3, 64)), rng.normal(size=(400, 3, 64))
    rows.append(("l2 scan 600x400", best_of(lambda: scoring.segment_weights(f_imp, f_exp, "l2", "loop"), 3, 1),
                 best_of(lambda: scoring.segment_weights(f_imp, f_exp, "l2", "numpy"), 3, 1)))
    return rows


E2E = """
import time
from swbt import envsim, pretrain as pt
from swbt.datamodel import DemoDataset
from swbt.transformer import ModelConfig
d = DemoDataset(envsim.run_episodes(envsim.scripted_policy('expert'), range(20)), 'expert')
cfg = pt.PretrainConfig(steps=3, batch_size=64, model=ModelConfig(precision='{p}'))
pt.pretrain(d, cfg)
cfg = pt.PretrainConfig(steps={n}, batch_size=64, model=ModelConfig(precision='{p}'))
t = time.perf_counter(); pt.pretrain(d, cfg); print((time.perf_counter() - t) / {n})
"""


def bench_e2e(precision, steps):
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, SWBT_NUMBA=flag)
        r = subprocess.run([sys.executable, "-c", E2E.format(p=precision, n=steps)], env=env,
                           capture_output=True, text=True, check=True)
        out[flag] = float(r.stdout.split()[-1])
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--e2e", action="store_true", help="also time full pretraining steps per backend")
    ap.add_argument("--steps", type=int, default=20)
    args = ap.parse_args(argv)
    print(f"numba available: {_accel.HAVE_NUMBA}; default backend: {_accel.backend_name()}")
    for dtype in (np.float64, np.float32):
        print(f"\n{np.dtype(dtype).name:<18} {'loop (ms)':>10} {'numpy (ms)':>11} {'speedup':>8}")
        for name, tl, tn in bench_kernels(dtype):
            print(f"{name:<18} {1e3 * tl:10.3f} {1e3 * tn:11.3f} {tn / tl:7.2f}x")
    if args.e2e:
        print(f"\npretrain step, batch 64 ({args.steps} steps)")
        for precision in ("f32", "f64"):
            t = bench_e2e(precision, args.steps)
            print(f"{precision}: SWBT_NUMBA=0 {t['0']:.4f} s/step   SWBT_NUMBA=1 {t['1']:.4f} s/step   "
                  f"speedup {t['0'] / t['1']:.2f}x")


if __name__ == "__main__":
    main()
