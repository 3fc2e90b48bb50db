"""Layout metrics: box IoU, colour-keyed blob detection, attention statistics."""
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage

from .imageio import write_pgm


class Box(NamedTuple):
    """Pixel box, inclusive-exclusive: columns x1..x2-1, rows y1..y2-1."""

    x1: int
    y1: int
    x2: int
    y2: int

    @property
    def area(self):
        return max(0, self.x2 - self.x1) * max(0, self.y2 - self.y1)


def iou(a, b):
    a, b = Box(*a), Box(*b)
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0) * max(ih, 0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def color_mask(image, color, max_dist=0.6):
    """Pixels within Euclidean distance ``max_dist`` of ``color`` (both in [-1, 1])."""
    diff = np.asarray(image, dtype=np.float64) - np.asarray(color, dtype=np.float64)
    return np.sqrt((diff * diff).sum(axis=-1)) <= max_dist


def detect_blob(image, color, max_dist=0.6, min_pixels=16):
    """Tight box of the largest 4-connected region near ``color``, or None."""
    hit = color_mask(image, color, max_dist)
    labels, n = ndimage.label(hit)
    if n == 0:
        return None
    sizes = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(sizes)) + 1
    if sizes[best - 1] < min_pixels:
        return None
    ys, xs = np.nonzero(labels == best)
    return Box(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def attention_inmask_fraction(attn_map, token_mask):
    w = np.asarray(attn_map, dtype=np.float64).reshape(-1)
    m = np.asarray(token_mask).reshape(-1).astype(bool)
    if w.shape != m.shape:
        raise ValueError("attention map and mask sizes differ")
    # summing the two parts separately makes "no mass outside" give exactly 1
    inside, outside = w[m].sum(), w[~m].sum()
    if inside + outside == 0:
        return 1.0
    return float(inside / (inside + outside))


def heatmap_bytes(attn_map, canvas_hw):
    """Min-max normalised grey levels, nearest-upsampled; constant maps give mid-grey."""
    a = np.asarray(attn_map, dtype=np.float64)
    if not np.isfinite(a).all():
        raise ValueError("attention map has non-finite values")
    lo, hi = a.min(), a.max()
    norm = np.full_like(a, 0.5) if hi == lo else (a - lo) / (hi - lo)
    g = np.floor(norm * 255.0 + 0.5).astype(np.uint8)
    H, W = canvas_hw
    return np.repeat(np.repeat(g, H // a.shape[0], axis=0), W // a.shape[1], axis=1)


def heatmap_export(attn_map, path, canvas_hw):
    write_pgm(path, heatmap_bytes(attn_map, canvas_hw))


@dataclass
class EvalReport:
    per_entity_iou: list
    miou: float
    attention_inmask_fraction: list = field(default_factory=list)
    seed_count: int = 0
    # Slots for scores computed by external models; left empty here.
    external_scores: dict = field(default_factory=dict)
    extra: Optional[dict] = None

    @classmethod
    def from_ious(cls, ious, **kw):
        ious = [float(v) for v in ious]
        return cls(per_entity_iou=ious, miou=float(np.mean(ious)) if ious else 0.0, **kw)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["per_entity_iou", "miou", "attention_inmask_fraction", "seed_count", "external_scores"],
    "additionalProperties": False,
    "properties": {
        "per_entity_iou": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "miou": {"type": "number", "minimum": 0, "maximum": 1},
        "attention_inmask_fraction": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "seed_count": {"type": "integer", "minimum": 0},
        "external_scores": {
            "type": "object",
            "properties": {name: {"type": "number"} for name in
                           ("entity_success_rate", "clip_score", "aesthetic_score", "mps", "pickscore")},
        },
        "extra": {"type": ["object", "null"]},
    },
}
