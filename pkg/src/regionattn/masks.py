"""Entity masks, their patchified token form, and the composed attention mask.

Token order of the joint sequence is::

    [global prompt (n_p) | entity 1 prompt (n_p) | ... | entity k prompt (n_p) | latent (n_z)]

The global prompt is handled as entity 0 whose spatial mask covers the whole
canvas.
"""
from dataclasses import dataclass

import numpy as np

from .numerics import NEG_SENTINEL


def rect_mask(h, w, box):
    """Rasterise an inclusive-exclusive box ``(x1, y1, x2, y2)`` to an h x w mask."""
    x1, y1, x2, y2 = (int(v) for v in box)
    if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
        raise ValueError(f"box {box} is empty or outside a {w}x{h} canvas")
    m = np.zeros((h, w), dtype=np.uint8)
    m[y1:y2, x1:x2] = 1
    return m


def bbox_of(mask):
    """Tight inclusive-exclusive bounding box of the nonzero pixels, or None."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def patchify_mask(mask, latent_downsample, patch_size):
    """Token j is active iff any pixel inside patch j is set (max pooling).

    Tokens are ordered row-major over the patch grid, matching latent patchify.
    """
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError("entity mask must be 2-D")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("entity mask must be binary")
    cell = latent_downsample * patch_size
    h, w = m.shape
    if h % cell or w % cell:
        raise ValueError(f"mask {h}x{w} not divisible by {cell}")
    blocks = m.reshape(h // cell, cell, w // cell, cell)
    return blocks.max(axis=(1, 3)).reshape(-1).astype(np.uint8)


@dataclass(frozen=True)
class ComposedAttentionMask:
    bits: np.ndarray  # (N_r, N_r) uint8
    n_p: int
    n_z: int
    k: int

    @property
    def size(self):
        return self.bits.shape[0]


def compose(entity_masks, n_p, n_z, prompt_lengths=None):
    """Binary visibility mask over the joint token sequence.

    ``entity_masks`` are the k local-entity patchified masks (the global entity
    is implicit). ``prompt_lengths`` optionally gives the real-token count of
    each of the k+1 prompts; padding tokens then see, and are seen by, only
    their own prompt block.
    """
    masks = [np.asarray(m, dtype=np.uint8).reshape(-1) for m in entity_masks]
    for m in masks:
        if m.shape[0] != n_z:
            raise ValueError(f"patchified mask length {m.shape[0]} != n_z {n_z}")
    k = len(masks)
    if prompt_lengths is not None and len(prompt_lengths) != k + 1:
        raise ValueError("prompt_lengths must have one entry per prompt, global first")
    slots = [np.ones(n_z, dtype=np.uint8)] + masks
    n_text = (k + 1) * n_p
    size = n_text + n_z
    bits = np.zeros((size, size), dtype=np.uint8)
    bits[n_text:, n_text:] = 1
    for i, sm in enumerate(slots):
        lo, hi = i * n_p, (i + 1) * n_p
        bits[lo:hi, lo:hi] = 1
        if prompt_lengths is None:
            real = n_p
        else:
            real = int(min(max(prompt_lengths[i], 0), n_p))
        bits[lo:lo + real, n_text:] = sm[None, :]
        bits[n_text:, lo:lo + real] = sm[:, None]
    return ComposedAttentionMask(bits=bits, n_p=n_p, n_z=n_z, k=k)


def mask_to_bias(mask):
    """Additive attention bias: visible -> 0, hidden -> large negative sentinel."""
    bits = mask.bits if isinstance(mask, ComposedAttentionMask) else np.asarray(mask)
    return np.where(bits.astype(bool), 0.0, NEG_SENTINEL)
