"""Inpainting fusion sampler.

Inside the union of entity masks the model velocity is used; outside it the
analytic velocity pointing back at the encoded input image. Guidance is
applied after fusion.
"""
from dataclasses import dataclass, field

import numpy as np

from .masks import patchify_mask
from .model import image_to_tokens, token_mask_to_pixels, tokens_to_image
from .sampler import SamplerConfig, build_condition, cfg_combine, euler_step, noise_latent


@dataclass
class InpaintRequest:
    image: np.ndarray
    entities: list = field(default_factory=list)  # EntitySpec
    global_prompt: str = ""
    negative_prompt: str = ""
    config: SamplerConfig = field(default_factory=SamplerConfig)


@dataclass
class FusionState:
    z_init: np.ndarray  # (n_z, token_dim)
    union: np.ndarray  # (n_z,) uint8


def fusion_state(req, model):
    cfg = model.cfg
    union = np.zeros(cfg.n_z, dtype=np.uint8)
    for e in req.entities:
        union = np.maximum(union, patchify_mask(e.mask, cfg.latent_downsample, cfg.patch_size))
    return FusionState(z_init=image_to_tokens(req.image, cfg), union=union)


def background_noise(z_t, z_init, sigma_t):
    if sigma_t <= 0:
        raise ValueError("background velocity is undefined at sigma = 0")
    return (z_t - z_init) / sigma_t


def fuse(n_f, n_b, union):
    u = np.asarray(union).astype(bool)
    return np.where(u.reshape(u.shape + (1,) * (np.ndim(n_f) - u.ndim)), n_f, n_b)


def inpaint(req, model, on_step=None):
    """Returns ``(image, info)``; ``info`` carries the latent drift outside the union."""
    cfg = model.cfg
    sc = req.config
    state = fusion_state(req, model)
    eps = noise_latent((cfg.n_z, cfg.token_dim), sc.seed)
    sig = sc.sigmas
    z = (1.0 - sig[0]) * state.z_init + sig[0] * eps
    pos = [build_condition(model, req.global_prompt, req.entities)]
    neg = [build_condition(model, req.negative_prompt, [])]
    for i in range(sc.steps):
        s = sig[i]
        n_f = model.forward(z[None], pos, [s]).data[0]
        n_b = background_noise(z, state.z_init, s)
        n_pos = fuse(n_f, n_b, state.union)
        if sc.cfg == 1.0:
            n = n_pos
        else:
            n_neg = model.forward(z[None], neg, [s]).data[0]
            n = cfg_combine(n_pos, n_neg, sc.cfg)
        z = euler_step(z, n, s, sig[i + 1])
        if on_step is not None:
            on_step(i, z, model)
    outside = ~state.union.astype(bool)
    drift = float(np.abs(z[outside] - state.z_init[outside]).max()) if outside.any() else 0.0
    info = {"background_drift": drift, "steps": sc.steps,
            "outside_pixels": token_mask_to_pixels(outside.astype(np.uint8), cfg)}
    return tokens_to_image(z, cfg), info
