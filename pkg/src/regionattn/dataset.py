"""Procedural entity-annotated training data.

Each sample holds 1-4 non-overlapping shapes (square, circle, triangle) in
distinct palette colours on a grey background. Shapes are drawn on the latent
cell grid and block-filled, so the block-mean codec reproduces them exactly.
"""
import base64
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .imageio import bytes_to_pixels, decode_netpbm, encode_ppm, pixels_to_bytes, read_mask_pgm, write_mask_pgm
from .masks import bbox_of

PALETTE_BYTES = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "magenta": (255, 0, 255),
    "cyan": (0, 255, 255),
}
BACKGROUND_BYTES = (128, 128, 128)
PALETTE = {k: bytes_to_pixels(v) for k, v in PALETTE_BYTES.items()}
BACKGROUND = bytes_to_pixels(BACKGROUND_BYTES)
COLORS = tuple(PALETTE_BYTES)
SHAPES = ("square", "circle", "triangle")
ENTITY_COUNT_WEIGHTS = (0.4, 0.3, 0.2, 0.1)


@dataclass
class Entity:
    prompt: str
    mask: np.ndarray  # (h, w) uint8
    bbox: tuple
    color: str = ""
    shape: str = ""


@dataclass
class TrainingSample:
    image: np.ndarray  # (h, w, 3) in [-1, 1]
    global_prompt: str
    entities: list = field(default_factory=list)


class Draws:
    """Sequential uniforms from one seeded PCG64 stream."""

    def __init__(self, seed, chunk=256):
        self._gen = np.random.PCG64(np.random.SeedSequence(seed))
        self._buf = np.empty(0)
        self._chunk = chunk

    def uniform(self):
        if self._buf.size == 0:
            raw = self._gen.random_raw(self._chunk)
            self._buf = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) / 9007199254740992.0
        u, self._buf = self._buf[0], self._buf[1:]
        return float(u)

    def integer(self, lo, hi):
        """Uniform integer in [lo, hi)."""
        return lo + min(int(self.uniform() * (hi - lo)), hi - lo - 1)

    def choice(self, seq):
        return seq[self.integer(0, len(seq))]

    def weighted(self, weights):
        u, acc = self.uniform() * sum(weights), 0.0
        for i, w in enumerate(weights):
            acc += w
            if u < acc:
                return i
        return len(weights) - 1


def shape_cells(shape, size):
    """Binary size x size cell pattern whose tight box is the full square."""
    c = np.arange(size) + 0.5
    if shape == "square":
        return np.ones((size, size), dtype=np.uint8)
    if shape == "circle":
        r = size / 2.0
        yy, xx = np.meshgrid(c, c, indexing="ij")
        return (((yy - r) ** 2 + (xx - r) ** 2) <= r * r).astype(np.uint8)
    if shape == "triangle":
        rows = np.arange(size)[:, None]
        half = (rows + 1) / size * (size / 2.0)
        return (np.abs(c[None, :] - size / 2.0) <= half).astype(np.uint8)
    raise ValueError(f"unknown shape {shape!r}")


def render(h, w, cell, items):
    """Rasterise (color, shape, (cx, cy, size)) items; returns image and pixel masks."""
    img = np.empty((h, w, 3))
    img[:] = BACKGROUND
    masks = []
    for color, shape, (cx, cy, size) in items:
        cells = np.zeros((h // cell, w // cell), dtype=np.uint8)
        cells[cy:cy + size, cx:cx + size] = shape_cells(shape, size)
        m = np.repeat(np.repeat(cells, cell, axis=0), cell, axis=1)
        img[m.astype(bool)] = PALETTE[color]
        masks.append(m)
    return img, masks


def sample_layout(draws, grid_h, grid_w, k, min_size=3, max_size=7, tries=200):
    """Place up to ``k`` squares of cells with a one-cell gap between them."""
    placed = []
    for _ in range(tries):
        if len(placed) == k:
            break
        size = draws.integer(min_size, max_size + 1)
        cx = draws.integer(0, grid_w - size + 1)
        cy = draws.integer(0, grid_h - size + 1)
        ok = all(cx + size + 1 <= px or px + ps + 1 <= cx or cy + size + 1 <= py or py + ps + 1 <= cy
                 for px, py, ps in placed)
        if ok:
            placed.append((cx, cy, size))
    return placed


def make_sample(seed, h=64, w=64, cell=4, k=None):
    draws = Draws(seed)
    if k is None:
        k = 1 + draws.weighted(ENTITY_COUNT_WEIGHTS)
    layout = sample_layout(draws, h // cell, w // cell, k)
    colors = list(COLORS)
    items = []
    for box in layout:
        color = colors.pop(draws.integer(0, len(colors)))
        items.append((color, draws.choice(SHAPES), box))
    img, masks = render(h, w, cell, items)
    entities = [Entity(prompt=f"{c} {s}", mask=m, bbox=bbox_of(m), color=c, shape=s)
                for (c, s, _), m in zip(items, masks)]
    return TrainingSample(image=img, global_prompt=" ".join(e.prompt for e in entities), entities=entities)


def synth_dataset(n, seed, h=64, w=64, cell=4):
    """``n`` samples; sample ``i`` depends only on ``(seed, i)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return [make_sample([seed, i], h, w, cell) for i in range(n)]


# ---------------------------------------------------------------------------
# JSON-lines serialisation with sidecar PGM masks
# ---------------------------------------------------------------------------


def save_dataset(dirpath, samples):
    os.makedirs(os.path.join(dirpath, "masks"), exist_ok=True)
    with open(os.path.join(dirpath, "samples.jsonl"), "w") as f:
        for i, s in enumerate(samples):
            ents = []
            for j, e in enumerate(s.entities):
                rel = f"masks/{i:06d}_{j}.pgm"
                write_mask_pgm(os.path.join(dirpath, rel), e.mask)
                ents.append({"prompt": e.prompt, "rect": list(e.bbox), "mask": rel,
                             "color": e.color, "shape": e.shape})
            row = {"image": base64.b64encode(encode_ppm(pixels_to_bytes(s.image))).decode("ascii"),
                   "global_prompt": s.global_prompt, "entities": ents}
            f.write(json.dumps(row, sort_keys=True) + "\n")


def load_dataset(path):
    """Read a dataset directory (or its samples.jsonl path)."""
    if os.path.isdir(path):
        path = os.path.join(path, "samples.jsonl")
    root = os.path.dirname(path)
    out = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            img = bytes_to_pixels(decode_netpbm(base64.b64decode(row["image"])))
            ents = []
            for e in row["entities"]:
                mask = read_mask_pgm(os.path.join(root, e["mask"]))
                ents.append(Entity(prompt=e["prompt"], mask=mask, bbox=tuple(e["rect"]),
                                   color=e.get("color", ""), shape=e.get("shape", "")))
            out.append(TrainingSample(image=img, global_prompt=row["global_prompt"], entities=ents))
    return out
