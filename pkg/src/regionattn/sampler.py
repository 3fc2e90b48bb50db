"""Flow-matching Euler sampler with classifier-free guidance."""
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .masks import patchify_mask
from .model import Condition, encode_prompt, tokens_to_image


@dataclass
class SamplerConfig:
    """Sigma schedule (sigma_T = 1 down to sigma_0 = 0), guidance scale and seed.

    The default schedule is linear, ``sigma_t = t / T``.
    """

    steps: int = 50
    cfg: float = 3.0
    seed: int = 0
    sigmas: list = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.cfg < 0:
            raise ValueError("cfg must be non-negative")
        if self.sigmas is None:
            self.sigmas = [t / self.steps for t in range(self.steps, -1, -1)]
        s = np.asarray(self.sigmas, dtype=np.float64)
        if s.shape != (self.steps + 1,):
            raise ValueError(f"need {self.steps + 1} sigmas, got {s.shape}")
        if s[0] != 1.0 or s[-1] != 0.0:
            raise ValueError("sigma schedule must start at exactly 1 and end at exactly 0")
        if not (np.diff(s) < 0).all():
            raise ValueError("sigma schedule must be strictly decreasing")
        self.sigmas = [float(v) for v in s]


@dataclass
class EntitySpec:
    prompt: str
    mask: np.ndarray  # canvas-resolution binary mask


@dataclass
class GenerationRequest:
    global_prompt: str
    entities: list = field(default_factory=list)
    negative_prompt: str = ""
    config: SamplerConfig = field(default_factory=SamplerConfig)


def noise_latent(shape, seed):
    return rng.normal(shape, seed)


def euler_step(z_t, n_t, sigma_t, sigma_prev):
    if not sigma_prev < sigma_t:
        raise ValueError("sigma_prev must be below sigma_t")
    return z_t + n_t * (sigma_prev - sigma_t)


def cfg_combine(n_pos, n_neg, cfg):
    if cfg == 1.0:
        return n_pos
    return n_neg + cfg * (n_pos - n_neg)


def build_condition(model, global_prompt, entities):
    cfg = model.cfg
    ents = []
    for e in entities:
        m = np.asarray(e.mask)
        if m.shape != (cfg.h, cfg.w):
            raise ValueError(f"entity mask {m.shape} does not match canvas {(cfg.h, cfg.w)}")
        ents.append((encode_prompt(e.prompt, cfg), patchify_mask(m, cfg.latent_downsample, cfg.patch_size)))
    return Condition(encode_prompt(global_prompt, cfg), ents)


def velocity(model, z, pos, neg, sigma, guidance, capture=False):
    """Guided velocity for a batch; the negative pass is skipped when guidance is 1."""
    B = z.shape[0]
    if guidance == 1.0:
        return model.forward(z, pos, np.full(B, sigma), capture=capture).data
    out = model.forward(np.concatenate([z, z]), pos + neg, np.full(2 * B, sigma), capture=capture).data
    return cfg_combine(out[:B], out[B:], guidance)


def generate_batch(requests, model, on_step=None, capture_steps=0):
    """Run requests that share one sigma schedule and guidance scale together.

    Every request keeps its own seed, and per-item results are identical to
    running it alone. ``on_step(i, z, model)`` is called after each update;
    attention is captured on the first ``capture_steps`` steps.
    """
    cfg = model.cfg
    sc = requests[0].config
    for r in requests:
        if r.config.sigmas != sc.sigmas or r.config.cfg != sc.cfg:
            raise ValueError("batched requests must share schedule and guidance")
    pos = [build_condition(model, r.global_prompt, r.entities) for r in requests]
    neg = [build_condition(model, r.negative_prompt, []) for r in requests]
    z = np.stack([noise_latent((cfg.n_z, cfg.token_dim), r.config.seed) for r in requests])
    sig = sc.sigmas
    for i in range(sc.steps):
        v = velocity(model, z, pos, neg, sig[i], sc.cfg, capture=i < capture_steps)
        z = euler_step(z, v, sig[i], sig[i + 1])
        if on_step is not None:
            on_step(i, z, model)
    return [tokens_to_image(zi, cfg) for zi in z], z


def generate(req, model, on_step=None, capture_steps=0):
    images, _ = generate_batch([req], model, on_step=on_step, capture_steps=capture_steps)
    return images[0]
