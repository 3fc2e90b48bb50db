"""Time the numba kernels against the numpy fallback.

Run: python3 benchmarks/bench_kernels.py [--repeat N]

Each backend runs in its own interpreter because the choice is fixed at
import time by REGIONATTN_KERNELS.
"""
import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import json, sys, time
import numpy as np
from regionattn import _kernels as K
from regionattn.model import ModelConfig, ToyDiT
from regionattn.dataset import make_sample
from regionattn.trainer import sample_condition
from regionattn.model import image_to_tokens

repeat = int(sys.argv[1])
rs = np.random.default_rng(0)
cases = {
    "matmul 1024x64 @ 64x192": (K.matmul2d, rs.standard_normal((1024, 64)), rs.standard_normal((64, 192))),
    "bmm 64x(104x16 @ 16x104)": (K.bmm, rs.standard_normal((64, 104, 16)), rs.standard_normal((64, 16, 104))),
    "softmax 6656x104": (K.softmax_rows, rs.standard_normal((6656, 104)), None),
}
out = {"backend": K.BACKEND}
for name, (fn, a, b) in cases.items():
    args = (a,) if b is None else (a, b)
    fn(*args)  # compile / warm up
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    out[name] = (time.perf_counter() - t0) / repeat

model = ToyDiT(ModelConfig())
samples = [make_sample([0, i]) for i in range(8)]
z = np.stack([image_to_tokens(s.image, model.cfg) for s in samples])
conds = [sample_condition(model, s) for s in samples]
model.forward(z, conds, np.full(8, 0.5))
t0 = time.perf_counter()
for _ in range(repeat):
    model.forward(z, conds, np.full(8, 0.5))
out["toy forward, batch 8"] = (time.perf_counter() - t0) / repeat
print(json.dumps(out))
"""


def run(backend, repeat):
    env = dict(os.environ, REGIONATTN_KERNELS=backend)
    res = subprocess.run([sys.executable, "-c", CHILD, str(repeat)], env=env, capture_output=True, text=True,
                         check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    nb, npy = run("numba", args.repeat), run("numpy", args.repeat)
    print(f"{'case':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for key in nb:
        if key == "backend":
            continue
        print(f"{key:32s} {nb[key] * 1e3:10.2f} {npy[key] * 1e3:10.2f} {npy[key] / nb[key]:7.1f}x")


if __name__ == "__main__":
    main()
