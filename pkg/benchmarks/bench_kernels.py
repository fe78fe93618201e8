"""Compare the numba kernels with the pure-numpy fallback.

Each backend runs in its own interpreter because FEDAUDIT_DISABLE_NUMBA is
read at import time.  The first call of every workload is timed separately
(it includes JIT compilation or cache loading for numba); the reported figure
is the best of ``--repeats`` later calls.

    python benchmarks/bench_kernels.py [--repeats 5] [--json out.json]
"""
import argparse
import json
import os
import subprocess
import sys
import time

WORKER = r"""
import json, sys, time
import numpy as np
import fedaudit
from fedaudit.canary import DesignConfig, design_canary
from fedaudit.data import PopulationConfig, generate
from fedaudit.fl import DpConfig, LocalTrainConfig, run_training
from fedaudit.models import ModelSpec, Sample, batch_param_grads, init_params, input_grad_of_param_dot, param_grad

repeats = int(sys.argv[1])
rng = np.random.default_rng(0)
spec = ModelSpec("mlp1", 32, 4, 16)
theta = init_params(spec, rng, 0.5)
z = Sample(rng.normal(size=32), 1)
v = rng.normal(size=theta.size)
X, Y = rng.normal(size=(512, 32)), rng.integers(0, 4, 512)
ds = generate(PopulationConfig(num_clients=2000, input_dim=32, num_classes=4, pool_size=128, seed=0))
dp = DpConfig(noise_multiplier=1.0, sample_rate=0.05)
tc = LocalTrainConfig(client_lr=0.5, batch_size=1)

def grads():
    for _ in range(200):
        param_grad(spec, theta, z)

def mixed():
    for _ in range(200):
        input_grad_of_param_dot(spec, theta, z, v)

work = {
    "param_grad x200": grads,
    "mixed_derivative x200": mixed,
    "batch_grads 512": lambda: batch_param_grads(spec, theta, X, Y),
    "train 5 rounds (N=2000, q=0.05)": lambda: run_training(spec, ds, tc, dp, rounds=5, root=1),
    "canary design (pool 128, T=300)": lambda: design_canary(
        spec, theta, ds.design_pool, DesignConfig(pool_size=128, design_iters=300, canary_lr=0.1),
        tc, dp, np.random.default_rng(1)),
}
out = {"backend": fedaudit.backend(), "results": {}}
for name, fn in work.items():
    t0 = time.perf_counter(); fn(); first = time.perf_counter() - t0
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter(); fn(); best = min(best, time.perf_counter() - t0)
    out["results"][name] = {"first": first, "best": best}
json.dump(out, sys.stdout)
"""


def run_backend(disable: bool, repeats: int) -> dict:
    env = {**os.environ, "FEDAUDIT_DISABLE_NUMBA": "1" if disable else "0"}
    p = subprocess.run([sys.executable, "-c", WORKER, str(repeats)], capture_output=True, text=True,
                       env=env, check=True)
    return json.loads(p.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--json", help="also write the raw timings here")
    args = ap.parse_args(argv)

    fast, slow = run_backend(False, args.repeats), run_backend(True, args.repeats)
    print(f"{'workload':36s} {'numba':>10s} {'numpy':>10s} {'speedup':>8s} {'numba 1st':>10s}")
    for name, f in fast["results"].items():
        s = slow["results"][name]
        print(f"{name:36s} {f['best'] * 1e3:9.2f}ms {s['best'] * 1e3:9.2f}ms "
              f"{s['best'] / f['best']:7.1f}x {f['first'] * 1e3:9.1f}ms")
    if fast["backend"] != "numba":
        print("note: numba unavailable, both columns ran the numpy fallback")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"numba": fast, "numpy": slow, "timestamp": time.time()}, fh, indent=2)


if __name__ == "__main__":
    main()
