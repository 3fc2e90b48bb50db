"""Low-rank adapters on the frozen linear layers of the toy DiT.

Weights here act on row vectors (``y = x @ W``), so the adapted layer is
``x @ (W + scale * down @ up)`` with ``down`` (d_in, r) and ``up`` (r, d_out).
In column convention this is ``W + (alpha / r) * B A`` with ``A = down.T``
and ``B = up.T``. ``up`` starts at zero, so a fresh adapter is a zero delta.
"""
import math

import numpy as np

from . import numerics as nx
from . import rng
from .checkpoint import load_tensors, save_tensors
from .model import lora_target_names


class LoRAAdapter:
    def __init__(self, model_cfg, rank=4, alpha=None, seed=0, targets=None, layer_shapes=None):
        self.rank = int(rank)
        self.alpha = float(rank if alpha is None else alpha)
        self.scale = self.alpha / self.rank
        self.seed = seed
        self.down = {}
        self.up = {}
        if layer_shapes is None:
            from .model import _linear_names
            layer_shapes = {n: (fi, fo) for n, fi, fo, _ in _linear_names(model_cfg)}
        names = targets if targets is not None else lora_target_names(model_cfg)
        for idx, name in enumerate(names):
            fan_in, fan_out = layer_shapes[name]
            a = rng.normal((fan_in, self.rank), [seed, 7919, idx]) / math.sqrt(fan_in)
            self.down[name] = nx.Tensor(a, requires_grad=True, name=name + ".lora_down")
            self.up[name] = nx.Tensor(np.zeros((self.rank, fan_out)), requires_grad=True,
                                      name=name + ".lora_up")

    def parameters(self):
        out = []
        for name in self.down:
            out += [self.down[name], self.up[name]]
        return out

    def named_arrays(self):
        out = {}
        for name in self.down:
            out[name + ".down"] = self.down[name].data
            out[name + ".up"] = self.up[name].data
        return out

    def effective_delta(self, name):
        return self.scale * self.down[name].data @ self.up[name].data

    def copy(self):
        other = object.__new__(LoRAAdapter)
        other.rank, other.alpha, other.scale, other.seed = self.rank, self.alpha, self.scale, self.seed
        other.down = {k: nx.Tensor(v.data.copy(), requires_grad=True, name=v.name) for k, v in self.down.items()}
        other.up = {k: nx.Tensor(v.data.copy(), requires_grad=True, name=v.name) for k, v in self.up.items()}
        return other

    def save(self, path, extra=None, optimizer=None):
        header = {"kind": "lora", "rank": self.rank, "alpha": self.alpha, "seed": self.seed,
                  "targets": list(self.down)}
        tensors = self.named_arrays()
        if optimizer is not None:
            header["optimizer"] = {"t": optimizer.t, "lr": optimizer.lr,
                                   "betas": [optimizer.b1, optimizer.b2], "eps": optimizer.eps,
                                   "weight_decay": optimizer.weight_decay}
            for i, p in enumerate(optimizer.params):
                tensors[f"adam.m.{p.name}"] = optimizer.m[i]
                tensors[f"adam.v.{p.name}"] = optimizer.v[i]
        if extra:
            header["extra"] = extra
        save_tensors(path, header, tensors)

    @classmethod
    def load(cls, path, model_cfg):
        header, tensors = load_tensors(path)
        if header.get("kind") != "lora":
            raise ValueError(f"{path} is not an adapter checkpoint")
        ad = cls(model_cfg, rank=header["rank"], alpha=header["alpha"], seed=header["seed"],
                 targets=header["targets"])
        for name in ad.down:
            ad.down[name].data = tensors[name + ".down"]
            ad.up[name].data = tensors[name + ".up"]
        ad.header = header
        ad.optimizer_state = {k: v for k, v in tensors.items() if k.startswith("adam.")}
        return ad
