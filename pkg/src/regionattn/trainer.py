"""Rectified-flow training: full-parameter base pretraining and adapter fine-tuning."""
import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from . import rng
from .dataset import COLORS, PALETTE, SHAPES, Draws
from .evalkit import detect_blob, iou
from .lora import LoRAAdapter
from .masks import patchify_mask, rect_mask
from .model import Condition, encode_prompt, image_to_tokens
from .sampler import EntitySpec, GenerationRequest, SamplerConfig, generate_batch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch: int = 8
    steps: int = 2000
    lr: float = 1e-3
    rank: int = 8
    alpha: float = None
    seed: int = 0
    weight_decay: float = 0.0
    sigma_min: float = 0.02
    sigma_max: float = 0.98
    # fraction of steps trained on the global prompt alone, with no entities
    drop_entities: float = 0.1
    # fraction of items whose global prompt is blanked (base pretraining only)
    drop_prompt: float = 0.1
    mask_mode: str = "rect"

    def __post_init__(self):
        if self.batch < 1 or self.steps < 0 or self.lr < 0 or self.rank < 1:
            raise ValueError("batch/rank must be positive, steps and lr non-negative")
        if not 0 < self.sigma_min < self.sigma_max < 1:
            raise ValueError("sigma range must lie inside (0, 1)")
        if self.mask_mode not in ("rect", "shape"):
            raise ValueError("mask_mode must be 'rect' or 'shape'")


# Recipe used for the full-scale model; kept for reference only.
FULL_SCALE_TRAIN_CONFIG = TrainConfig(batch=64, steps=20_000, lr=1e-4, rank=64)


class TrainingDiverged(RuntimeError):
    pass


def sample_condition(model, sample, mask_mode="rect", with_entities=True, global_prompt=None):
    cfg = model.cfg
    ents = []
    if with_entities:
        for e in sample.entities:
            m = rect_mask(cfg.h, cfg.w, e.bbox) if mask_mode == "rect" else e.mask
            ents.append((encode_prompt(e.prompt, cfg), patchify_mask(m, cfg.latent_downsample, cfg.patch_size)))
    text = sample.global_prompt if global_prompt is None else global_prompt
    return Condition(encode_prompt(text, cfg), ents)


def rf_loss(model, x0, conds, sigma, eps):
    """Mean squared error between predicted and straight-path velocity ``eps - x0``."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.ndim == 2:
        x0, eps = x0[None], eps[None]
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if ((sigma <= 0) | (sigma >= 1)).any():
        raise ValueError("sigma must lie strictly inside (0, 1)")
    s = sigma[:, None, None]
    z = (1.0 - s) * x0 + s * eps
    pred = model.forward(z, conds, sigma)
    return nx.mse(pred, eps - x0)


def _step_draws(seed, step, batch, n_data, cfg_train, n_z, token_dim):
    d = Draws([seed, step, 0])
    idx = [d.integer(0, n_data) for _ in range(batch)]
    drop_ent = d.uniform() < cfg_train.drop_entities
    drop_prompt = [d.uniform() < cfg_train.drop_prompt for _ in range(batch)]
    u = rng.uniform(batch, [seed, step, 1])
    sigma = cfg_train.sigma_min + (cfg_train.sigma_max - cfg_train.sigma_min) * u
    eps = rng.normal((batch, n_z, token_dim), [seed, step, 2])
    return idx, drop_ent, drop_prompt, sigma, eps


class _TokenCache:
    def __init__(self, model, dataset):
        self.model, self.dataset, self.cache = model, dataset, {}

    def __getitem__(self, i):
        if i not in self.cache:
            self.cache[i] = image_to_tokens(self.dataset[i].image, self.model.cfg)
        return self.cache[i]


def _fit(model, params, dataset, tc, make_conds, optimizer, start, stop, on_step):
    cfg = model.cfg
    tokens = _TokenCache(model, dataset)
    losses = []
    for step in range(start, stop):
        idx, drop_ent, drop_prompt, sigma, eps = _step_draws(tc.seed, step, tc.batch, len(dataset), tc,
                                                             cfg.n_z, cfg.token_dim)
        x0 = np.stack([tokens[i] for i in idx])
        conds = make_conds(idx, drop_ent, drop_prompt)
        try:
            with nx.GradTape():
                loss = rf_loss(model, x0, conds, sigma, eps)
                grads = nx.backward(loss, params)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"non-finite value at step {step}: {exc}") from exc
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss is {value} at step {step}")
        optimizer.step(grads)
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
    return losses


def pretrain(model, dataset, tc, on_step=None):
    """Full-parameter training on global prompts only (the base model).

    A fraction of global prompts is blanked so the empty prompt works as the
    guidance negative.
    """
    if not dataset:
        raise ValueError("empty dataset")
    params = list(model.params.values())
    model.set_trainable(True)
    model.adapter = None
    opt = nx.AdamW(params, lr=tc.lr, weight_decay=tc.weight_decay)

    def make_conds(idx, drop_ent, drop_prompt):
        return [sample_condition(model, dataset[i], with_entities=False, global_prompt="" if dp else None)
                for i, dp in zip(idx, drop_prompt)]

    try:
        losses = _fit(model, params, dataset, tc, make_conds, opt, 0, tc.steps, on_step)
    finally:
        model.set_trainable(False)
    return losses


def train(model, dataset, tc, adapter=None, optimizer_state=None, start_step=0, on_step=None):
    """Fit adapter weights with base weights frozen; returns ``(adapter, losses, optimizer)``.

    Passing the adapter, optimizer state and step of a checkpoint resumes the
    run exactly: every step draws its batch from ``(seed, step)`` only.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if adapter is None:
        adapter = LoRAAdapter(model.cfg, rank=tc.rank, alpha=tc.alpha, seed=tc.seed, layer_shapes=model.layer_shapes)
    model.set_trainable(False)
    model.adapter = adapter
    params = adapter.parameters()
    opt = nx.AdamW(params, lr=tc.lr, weight_decay=tc.weight_decay)
    if optimizer_state:
        opt.t = start_step
        for i, p in enumerate(params):
            opt.m[i] = optimizer_state[f"adam.m.{p.name}"].copy()
            opt.v[i] = optimizer_state[f"adam.v.{p.name}"].copy()

    def make_conds(idx, drop_ent, drop_prompt):
        return [sample_condition(model, dataset[i], tc.mask_mode, with_entities=not drop_ent) for i in idx]

    losses = _fit(model, params, dataset, tc, make_conds, opt, start_step, tc.steps, on_step)
    return adapter, losses, opt


# ---------------------------------------------------------------------------
# layout activation probe
# ---------------------------------------------------------------------------


@dataclass
class ProbeItem:
    color: str
    shape: str
    box: tuple

    @property
    def prompt(self):
        return f"{self.color} {self.shape}"


def make_probe_set(n, seed, model_cfg, min_tokens=2, max_tokens=3):
    """Single-entity probe boxes aligned to the latent token grid.

    Token alignment means the patchified mask covers exactly the requested box,
    so a perfect placement scores IoU 1.
    """
    cell = model_cfg.latent_downsample * model_cfg.patch_size
    gh, gw = model_cfg.grid
    d = Draws([seed, 99])
    items = []
    for _ in range(n):
        size = d.integer(min_tokens, max_tokens + 1)
        cx, cy = d.integer(0, gw - size + 1), d.integer(0, gh - size + 1)
        items.append(ProbeItem(d.choice(COLORS), d.choice(SHAPES),
                               (cx * cell, cy * cell, (cx + size) * cell, (cy + size) * cell)))
    return items


def probe_requests(items, seeds, model_cfg, steps=50, guidance=3.0):
    reqs = []
    for it in items:
        mask = rect_mask(model_cfg.h, model_cfg.w, it.box)
        for s in seeds:
            reqs.append(GenerationRequest(it.prompt, [EntitySpec(it.prompt, mask)], "",
                                          SamplerConfig(steps=steps, cfg=guidance, seed=s)))
    return reqs


def layout_activation_probe(model, adapter, items, seeds, steps=50, guidance=3.0, chunk=64):
    """Mean IoU between requested boxes and detected blobs; detection failure scores 0.

    Returns ``(mean_iou, ious)`` with ``ious`` shaped (items, seeds).
    """
    saved = model.adapter
    model.adapter = adapter
    try:
        reqs = probe_requests(items, seeds, model.cfg, steps, guidance)
        images = []
        for lo in range(0, len(reqs), chunk):
            imgs, _ = generate_batch(reqs[lo:lo + chunk], model)
            images += imgs
    finally:
        model.adapter = saved
    ious = np.zeros((len(items), len(seeds)))
    for i, it in enumerate(items):
        for j in range(len(seeds)):
            box = detect_blob(images[i * len(seeds) + j], PALETTE[it.color])
            ious[i, j] = 0.0 if box is None else iou(box, it.box)
    return float(ious.mean()), ious
