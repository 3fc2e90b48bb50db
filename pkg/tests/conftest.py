import numpy as np
import pytest

from regionattn import numerics as nx
from regionattn.model import ModelConfig, ToyDiT


def central_fd(loss_fn, tensor, index, h=1e-5):
    old = tensor.data[index]
    tensor.data[index] = old + h
    up = loss_fn()
    tensor.data[index] = old - h
    down = loss_fn()
    tensor.data[index] = old
    return (up - down) / (2 * h)


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(loss_tensor_fn, params, n_per_param=None, seed=0, h=1e-5):
    """Worst relative error between tape gradients and central differences."""
    with nx.GradTape():
        loss = loss_tensor_fn()
        grads = nx.backward(loss, params)

    def value():
        return float(loss_tensor_fn().data)

    rs = np.random.default_rng(seed)
    worst, checked = 0.0, 0
    for p in params:
        flat = np.arange(p.data.size)
        if n_per_param is not None and flat.size > n_per_param:
            flat = rs.choice(flat, n_per_param, replace=False)
        for f in flat:
            idx = np.unravel_index(f, p.shape)
            num = central_fd(value, p, idx, h)
            worst = max(worst, rel_err(grads[p][idx], num))
            checked += 1
    return worst, checked


@pytest.fixture
def tiny_cfg():
    return ModelConfig(h=16, w=16, channels=3, latent_downsample=2, patch_size=2, d=16, heads=2,
                       n_p=4, n_double=1, n_single=1, vocab_hash_dim=8, mlp_ratio=2, seed=3)


def randomize(model, seed=0, scale=0.3):
    """Give every parameter (including zero-initialised ones) random values."""
    rs = np.random.default_rng(seed)
    for p in model.params.values():
        p.data = rs.standard_normal(p.shape) * scale
    return model


@pytest.fixture
def tiny_model(tiny_cfg):
    return randomize(ToyDiT(tiny_cfg))
