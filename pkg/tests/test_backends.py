"""The numba kernels and their pure-numpy fallback must agree."""
import json
import os
import subprocess
import sys

import numpy as np
import pytest

SCRIPT = r"""
import json, sys
import numpy as np
import fedaudit
from fedaudit import kernels
from fedaudit.canary import DesignConfig, design_canary
from fedaudit.data import PopulationConfig, generate
from fedaudit.fl import DpConfig, LocalTrainConfig, run_training
from fedaudit.models import (ModelSpec, Sample, batch_param_grads, init_params, input_grad_of_grad_norm,
                             input_grad_of_param_dot, loss, param_grad)

out = {"backend": fedaudit.backend()}
for arch in ("linear", "mlp1"):
    rng = np.random.default_rng(0)
    spec = ModelSpec(arch, 5, 3, 6)
    theta = init_params(spec, rng, 0.8)
    z = Sample(rng.normal(size=5), 2)
    v = rng.normal(size=theta.size)
    X, Y = rng.normal(size=(9, 5)), rng.integers(0, 3, 9)
    out[arch] = {
        "loss": [loss(spec, theta, z)],
        "grad": param_grad(spec, theta, z).tolist(),
        "mixed": input_grad_of_param_dot(spec, theta, z, v).tolist(),
        "norm": input_grad_of_grad_norm(spec, theta, z).tolist(),
        "batch": batch_param_grads(spec, theta, X, Y).ravel().tolist(),
    }
    ds = generate(PopulationConfig(num_clients=40, input_dim=5, num_classes=3, pool_size=16, seed=2))
    dp = DpConfig(noise_multiplier=0.5, sample_rate=0.3)
    tc = LocalTrainConfig(client_lr=0.5, batch_size=1)
    res = run_training(spec, ds, tc, dp, rounds=3, root=1)
    out[arch]["train"] = res.theta.tolist()
    c = design_canary(spec, res.theta, ds.design_pool, DesignConfig(pool_size=16, design_iters=30,
                      canary_lr=0.05), tc, dp, np.random.default_rng(5))
    out[arch]["canary"] = c.sample.x.tolist() + [c.initial_loss, c.final_loss]
json.dump(out, sys.stdout)
"""


def run(disable):
    env = {**os.environ, "FEDAUDIT_DISABLE_NUMBA": "1" if disable else "0"}
    p = subprocess.run([sys.executable, "-c", SCRIPT], capture_output=True, text=True, env=env,
                       timeout=600)
    assert p.returncode == 0, p.stderr
    return json.loads(p.stdout)


@pytest.fixture(scope="module")
def results():
    return run(False), run(True)


def test_flag_selects_backend(results):
    fast, slow = results
    assert fast["backend"] == "numba"
    assert slow["backend"] == "numpy"


@pytest.mark.parametrize("arch", ["linear", "mlp1"])
@pytest.mark.parametrize("key", ["loss", "grad", "mixed", "norm", "batch", "train", "canary"])
def test_backends_agree(results, arch, key):
    fast, slow = results
    a, b = np.array(fast[arch][key]), np.array(slow[arch][key])
    scale = max(1.0, np.abs(b).max())
    assert np.max(np.abs(a - b)) <= 1e-9 * scale
