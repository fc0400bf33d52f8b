"""Compare the numba kernels with their numpy fallbacks.

Run with ``python3 benchmarks/bench_kernels.py``. Part one times each kernel
in-process at the shapes a default training step uses. Part two times a full
forward/backward/optimizer step in fresh interpreters with ``VBMTL_NUMBA=1``
and ``VBMTL_NUMBA=0`` so the whole backend switch is exercised.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from vbmtl import _kernels as K

STEP_SNIPPET = r"""
import json, time
import numpy as np
from vbmtl import BACKEND
from vbmtl.config import build_config
from vbmtl.data import Dataset, generate_synthetic
from vbmtl.diffcore import AdamW
from vbmtl.heads import TASK_NAMES
from vbmtl.trainer import MultiTaskModel, task_losses
from vbmtl.weighting import LossWeighting

cfg = build_config(overrides=["architecture={arch}"])
man, sig = generate_synthetic(16, 0)
ds = Dataset(man, sig, cfg.backbone.input_len)
rng = np.random.default_rng(0)
model = MultiTaskModel(cfg, rng)
weighting = LossWeighting("dwa", 4)
opt = AdamW(model.parameters(), {{"backbone": 1e-5, "head": 1e-3, "weighting": 1e-3}})
idx = np.arange(8)
truth = {{k: v[idx] for k, v in ds.labels().items()}}

def step():
    out = model(ds.waves[idx], truth, rng=rng)
    losses = task_losses(out, truth, TASK_NAMES)
    weighting([losses[t] for t in TASK_NAMES]).backward()
    opt.step()

step()  # warm-up (numba compile / cache load)
times = []
for _ in range({reps}):
    t0 = time.perf_counter(); step(); times.append(time.perf_counter() - t0)
print(json.dumps({{"backend": BACKEND, "median_ms": 1e3 * float(np.median(times))}}))
"""


def _best(fn, number, repeat=5):
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number * 1e6


def kernel_table(number=200):
    if not K.HAVE_NUMBA:
        print("numba unavailable or disabled; only the numpy column is meaningful")
    rng = np.random.default_rng(0)
    x_conv = rng.normal(size=(8, 4008, 1))
    n_out = (4008 - 10) // 8 + 1
    dcols = rng.normal(size=(8, n_out, 10))
    att = rng.normal(size=(8 * 4 * 31, 31))
    dy = rng.normal(size=att.shape)
    ln = rng.normal(size=(8 * 31, 64))
    dln = rng.normal(size=ln.shape)
    y = K.softmax_fwd_np(att)
    xhat, rstd = K.layer_norm_fwd_np(ln, 1e-5)

    cases = [
        ("im2col", lambda: np.ascontiguousarray(K.im2col_np(x_conv, 10, 8, n_out)),
         (lambda: K._im2col_nb(x_conv, 10, 8, n_out)) if K.HAVE_NUMBA else None),
        ("col2im", lambda: K.col2im_np(dcols, 4008, 10, 8),
         (lambda: K._col2im_nb(dcols, 4008, 10, 8)) if K.HAVE_NUMBA else None),
        ("softmax_fwd", lambda: K.softmax_fwd_np(att),
         (lambda: K._softmax_fwd_nb(att)) if K.HAVE_NUMBA else None),
        ("softmax_bwd", lambda: K.softmax_bwd_np(y, dy),
         (lambda: K._softmax_bwd_nb(y, dy)) if K.HAVE_NUMBA else None),
        ("layer_norm_fwd", lambda: K.layer_norm_fwd_np(ln, 1e-5),
         (lambda: K._layer_norm_fwd_nb(ln, 1e-5)) if K.HAVE_NUMBA else None),
        ("layer_norm_bwd", lambda: K.layer_norm_bwd_np(dln, xhat, rstd),
         (lambda: K._layer_norm_bwd_nb(dln, xhat, rstd)) if K.HAVE_NUMBA else None),
    ]
    print(f"{'kernel':<16}{'numpy us':>11}{'numba us':>11}{'speedup':>9}")
    rows = []
    for name, np_fn, nb_fn in cases:
        t_np = _best(np_fn, number)
        if nb_fn is not None:
            nb_fn()  # compile
            t_nb = _best(nb_fn, number)
            print(f"{name:<16}{t_np:>11.1f}{t_nb:>11.1f}{t_np / t_nb:>8.2f}x")
        else:
            t_nb = float("nan")
            print(f"{name:<16}{t_np:>11.1f}{'-':>11}{'-':>9}")
        rows.append((name, t_np, t_nb))
    return rows


def train_step_table(archs=("vanilla", "chain", "branch"), reps=10):
    print(f"\n{'train step (batch 8)':<22}{'numpy ms':>10}{'numba ms':>10}")
    for arch in archs:
        res = {}
        for flag in ("0", "1"):
            env = dict(os.environ, VBMTL_NUMBA=flag)
            out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(arch=arch, reps=reps)],
                                 env=env, capture_output=True, text=True, check=True)
            rec = json.loads(out.stdout.strip().splitlines()[-1])
            res[rec["backend"]] = rec["median_ms"]
        print(f"{arch:<22}{res.get('numpy', float('nan')):>10.1f}{res.get('numba', float('nan')):>10.1f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--number", type=int, default=200, help="calls per kernel timing")
    ap.add_argument("--reps", type=int, default=10, help="timed train steps per backend")
    ap.add_argument("--skip-steps", action="store_true", help="only run the kernel table")
    args = ap.parse_args()
    kernel_table(args.number)
    if not args.skip_steps:
        train_step_table(reps=args.reps)


if __name__ == "__main__":
    main()
