"""Toy diffusion transformer with regional attention.

Pieces: a hash-based prompt encoder, an exact block-mean latent codec,
patchify/unpatchify, double-stream blocks (separate text and latent
projections) and single-stream blocks (one projection shared by both), all
conditioned on the noise level through adaptive LayerNorm.
"""
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from . import rng
from .checkpoint import load_tensors, save_tensors
from .masks import compose, mask_to_bias


@dataclass(frozen=True)
class ModelConfig:
    h: int = 64
    w: int = 64
    channels: int = 3
    latent_downsample: int = 4
    patch_size: int = 2
    d: int = 64
    heads: int = 4
    n_p: int = 8
    n_double: int = 2
    n_single: int = 2
    vocab_hash_dim: int = 32
    mlp_ratio: int = 2
    seed: int = 0

    def __post_init__(self):
        cell = self.latent_downsample * self.patch_size
        if self.h % cell or self.w % cell:
            raise ValueError(f"canvas {self.h}x{self.w} not divisible by {cell}")
        ds = self.latent_downsample
        if ds < 1 or ds & (ds - 1):
            raise ValueError("latent_downsample must be a power of two")
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if (self.d // self.heads) % 2 or self.d % 4:
            raise ValueError("d and head width must be even")

    @property
    def grid(self):
        cell = self.latent_downsample * self.patch_size
        return self.h // cell, self.w // cell

    @property
    def latent_hw(self):
        return self.h // self.latent_downsample, self.w // self.latent_downsample

    @property
    def n_z(self):
        gh, gw = self.grid
        return gh * gw

    @property
    def token_dim(self):
        return self.patch_size * self.patch_size * self.channels


# ---------------------------------------------------------------------------
# prompt encoder stub
# ---------------------------------------------------------------------------

PAD_KEY = "\x00<pad>"


@dataclass(frozen=True)
class PromptEmbedding:
    tokens: np.ndarray  # (n_p, vocab_hash_dim)
    length: int  # real (non-padding) tokens
    source_text: str


def token_vector(token, dim):
    return rng.normal(dim, rng.text_seed(token))


def encode_prompt(text, cfg):
    """Whitespace tokens hashed to fixed random rows, padded/truncated to n_p."""
    words = text.split()[: cfg.n_p]
    rows = [token_vector(w, cfg.vocab_hash_dim) for w in words]
    pad = token_vector(PAD_KEY, cfg.vocab_hash_dim)
    rows += [pad] * (cfg.n_p - len(rows))
    return PromptEmbedding(tokens=np.stack(rows), length=len(words), source_text=text)


# ---------------------------------------------------------------------------
# latent codec and patchify
# ---------------------------------------------------------------------------


def encode_image(img, downsample):
    """Block mean over ``downsample`` x ``downsample`` cells, per channel.

    Reduced by repeated pairwise halving so constant blocks are reproduced
    exactly.
    """
    x = np.asarray(img, dtype=np.float64)
    h, w = x.shape[:2]
    if x.ndim != 3 or h % downsample or w % downsample:
        raise ValueError(f"image {x.shape} not divisible by {downsample}")
    while downsample > 1:
        x = (x[0::2] + x[1::2]) * 0.5
        x = (x[:, 0::2] + x[:, 1::2]) * 0.5
        downsample //= 2
    return x


def decode_image(lat, downsample):
    """Nearest (block-fill) upsampling back to pixel resolution."""
    lat = np.asarray(lat, dtype=np.float64)
    return np.repeat(np.repeat(lat, downsample, axis=0), downsample, axis=1)


def patchify(lat, patch):
    """(H, W, C) latent -> (n_z, p*p*C) tokens, row-major over the patch grid."""
    H, W, C = lat.shape
    if H % patch or W % patch:
        raise ValueError(f"latent {lat.shape} not divisible by patch {patch}")
    x = lat.reshape(H // patch, patch, W // patch, patch, C).transpose(0, 2, 1, 3, 4)
    return x.reshape((H // patch) * (W // patch), patch * patch * C).copy()


def unpatchify(tokens, grid, patch, channels):
    gh, gw = grid
    x = np.asarray(tokens).reshape(gh, gw, patch, patch, channels).transpose(0, 2, 1, 3, 4)
    return x.reshape(gh * patch, gw * patch, channels).copy()


def image_to_tokens(img, cfg):
    return patchify(encode_image(img, cfg.latent_downsample), cfg.patch_size)


def tokens_to_image(tokens, cfg):
    lat = unpatchify(tokens, cfg.grid, cfg.patch_size, cfg.channels)
    return decode_image(lat, cfg.latent_downsample)


def token_mask_to_pixels(token_mask, cfg):
    """Pixel-resolution pre-image of a per-token binary vector."""
    gh, gw = cfg.grid
    cell = cfg.latent_downsample * cfg.patch_size
    m = np.asarray(token_mask).reshape(gh, gw)
    return np.repeat(np.repeat(m, cell, axis=0), cell, axis=1)


# ---------------------------------------------------------------------------
# positional / timestep encodings
# ---------------------------------------------------------------------------


def sincos_1d(pos, dim):
    pos = np.asarray(pos, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = pos[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def sincos_2d(gh, gw, dim):
    ys, xs = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    return np.concatenate([sincos_1d(ys.reshape(-1), dim // 2),
                           sincos_1d(xs.reshape(-1), dim // 2)], axis=-1)


def timestep_embedding(sigma, dim):
    return sincos_1d(np.asarray(sigma, dtype=np.float64) * 1000.0, dim)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def attention(q, k, v, bias, heads, probs_out=None):
    """Multi-head softmax(QK^T / sqrt(d_head) + bias) V over (B, N, d) inputs.

    ``bias`` is a constant array broadcastable to (B, heads, N, N).
    """
    B, N, d = q.shape
    dh = d // heads
    qh = nx.permute(nx.reshape(q, (B, N, heads, dh)), (0, 2, 1, 3))
    kt = nx.permute(nx.reshape(k, (B, N, heads, dh)), (0, 2, 3, 1))
    vh = nx.permute(nx.reshape(v, (B, N, heads, dh)), (0, 2, 1, 3))
    scores = nx.scale(nx.matmul(qh, kt), 1.0 / math.sqrt(dh))
    if bias is not None:
        scores = nx.add(scores, bias)
    probs = nx.softmax_lastdim(scores)
    if probs_out is not None:
        probs_out.append(probs.data)
    out = nx.matmul(probs, vh)
    return nx.reshape(nx.permute(out, (0, 2, 1, 3)), (B, N, d))


def linear(x, w, b=None):
    y = nx.matmul(x, w)
    return y if b is None else nx.add(y, b)


def regional_attention(h, mask, w_qkv, b_qkv, w_out, b_out, heads, probs_out=None):
    """Joint attention over one token sequence restricted by a composed mask."""
    h = nx.as_tensor(h)
    squeeze = h.ndim == 2
    if squeeze:
        h = nx.reshape(h, (1,) + h.shape)
    if mask is not None and mask.size != h.shape[1]:
        raise ValueError(f"sequence length {h.shape[1]} != mask size {mask.size}")
    d = h.shape[-1]
    q, k, v = nx.split(linear(h, w_qkv, b_qkv), [d, d, d], axis=2)
    bias = None if mask is None else mask_to_bias(mask)[None, None]
    out = linear(attention(q, k, v, bias, heads, probs_out), w_out, b_out)
    return nx.reshape(out, out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------


@dataclass
class Condition:
    """Global prompt plus (prompt embedding, patchified mask) entity pairs."""

    global_prompt: PromptEmbedding
    entities: list = field(default_factory=list)


@dataclass
class BlockWeights:
    text_qkv: nx.Tensor
    latent_qkv: nx.Tensor
    text_out: nx.Tensor
    latent_out: nx.Tensor
    text_mod: nx.Tensor
    latent_mod: nx.Tensor


def _linear_names(cfg):
    """(name, fan_in, fan_out, zero_init) for every linear layer."""
    d, r = cfg.d, cfg.mlp_ratio * cfg.d
    out = [
        ("time.fc1", d, d, False),
        ("time.fc2", d, d, False),
        ("img_in", cfg.token_dim, d, False),
        ("txt_in", cfg.vocab_hash_dim, d, False),
    ]
    for i in range(cfg.n_double):
        for s in ("txt", "img"):
            p = f"double.{i}.{s}"
            out += [
                (f"{p}.mod", d, 6 * d, True),
                (f"{p}.qkv", d, 3 * d, False),
                (f"{p}.proj", d, d, False),
                (f"{p}.fc1", d, r, False),
                (f"{p}.fc2", r, d, False),
            ]
    for i in range(cfg.n_single):
        p = f"single.{i}"
        out += [
            (f"{p}.mod", d, 3 * d, True),
            (f"{p}.linear1", d, 3 * d + r, False),
            (f"{p}.linear2", d + r, d, False),
        ]
    out += [("final.mod", d, 2 * d, True), ("final.out", d, cfg.token_dim, True)]
    return out


# Layers carrying adapters: projections around attention and the adaLN linears.
LORA_SUFFIXES = ("mod", "qkv", "proj", "linear1", "linear2")


def lora_target_names(cfg):
    return [name for name, *_ in _linear_names(cfg)
            if name.startswith(("double.", "single.")) and name.rsplit(".", 1)[1] in LORA_SUFFIXES]


class ToyDiT:
    def __init__(self, cfg=None, params=None):
        self.cfg = cfg or ModelConfig()
        self.params = params if params is not None else self._init_params()
        self.layer_shapes = {name: (fi, fo) for name, fi, fo, _ in _linear_names(self.cfg)}
        self.adapter = None
        self.captured = None
        self.forward_calls = 0
        cfg = self.cfg
        gh, gw = cfg.grid
        self.latent_pos = sincos_2d(gh, gw, cfg.d)
        self.prompt_pos = sincos_1d(np.arange(cfg.n_p), cfg.d)

    def _init_params(self):
        cfg = self.cfg
        params = {}
        for idx, (name, fan_in, fan_out, zero) in enumerate(_linear_names(cfg)):
            if zero:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal((fan_in, fan_out), [cfg.seed, idx]) / math.sqrt(fan_in)
            params[name + ".w"] = nx.Tensor(w, name=name + ".w")
            params[name + ".b"] = nx.Tensor(np.zeros(fan_out), name=name + ".b")
        return params

    # -- parameter handling -------------------------------------------------

    def set_trainable(self, flag):
        for p in self.params.values():
            p.requires_grad = flag

    def block_weights(self, kind, i):
        P = self.params
        if kind == "double":
            t, z = f"double.{i}.txt", f"double.{i}.img"
            return BlockWeights(P[t + ".qkv.w"], P[z + ".qkv.w"], P[t + ".proj.w"],
                                P[z + ".proj.w"], P[t + ".mod.w"], P[z + ".mod.w"])
        s = f"single.{i}"
        return BlockWeights(P[s + ".linear1.w"], P[s + ".linear1.w"], P[s + ".linear2.w"],
                            P[s + ".linear2.w"], P[s + ".mod.w"], P[s + ".mod.w"])

    def _linear(self, x, name):
        y = linear(x, self.params[name + ".w"], self.params[name + ".b"])
        ad = self.adapter
        if ad is not None and name in ad.down:
            delta = nx.matmul(nx.matmul(x, ad.down[name]), ad.up[name])
            y = nx.add(y, nx.scale(delta, ad.scale))
        return y

    # -- conditioning -------------------------------------------------------

    def _prepare(self, conds):
        """Stack prompts into (B, (k_max+1) n_p, hash_dim) and build (B, 1, N, N) biases.

        Shorter entity lists are padded with empty, zero-mask entities; those
        tokens are invisible to every real token, so padding is exact.
        """
        cfg = self.cfg
        k_max = max(len(c.entities) for c in conds)
        empty = encode_prompt("", cfg)
        zero_mask = np.zeros(cfg.n_z, dtype=np.uint8)
        texts, biases = [], []
        for c in conds:
            ents = list(c.entities) + [(empty, zero_mask)] * (k_max - len(c.entities))
            prompts = [c.global_prompt] + [e[0] for e in ents]
            for pe in prompts:
                if pe.tokens.shape != (cfg.n_p, cfg.vocab_hash_dim):
                    raise ValueError(f"prompt embedding shape {pe.tokens.shape} does not match config")
            M = compose([e[1] for e in ents], cfg.n_p, cfg.n_z, [pe.length for pe in prompts])
            texts.append(np.concatenate([pe.tokens for pe in prompts], axis=0))
            biases.append(mask_to_bias(M))
        return np.stack(texts), np.stack(biases)[:, None], k_max

    # -- blocks -------------------------------------------------------------

    @staticmethod
    def _modulate(x, shift, scale_):
        return nx.add(nx.mul(nx.layer_norm(x), nx.add(scale_, 1.0)), shift)

    def _chunks(self, mod, n):
        B = mod.shape[0]
        mod = nx.reshape(mod, (B, 1, mod.shape[-1]))
        return nx.split(mod, [self.cfg.d] * n, axis=2)

    def double_stream_block(self, i, p, z, bias, vec_act, probs_out=None):
        cfg = self.cfg
        d = cfg.d
        pre = f"double.{i}"
        tmod = self._chunks(self._linear(vec_act, pre + ".txt.mod"), 6)
        imod = self._chunks(self._linear(vec_act, pre + ".img.mod"), 6)
        qkv_p = self._linear(self._modulate(p, tmod[0], tmod[1]), pre + ".txt.qkv")
        qkv_z = self._linear(self._modulate(z, imod[0], imod[1]), pre + ".img.qkv")
        qp, kp, vp = nx.split(qkv_p, [d, d, d], axis=2)
        qz, kz, vz = nx.split(qkv_z, [d, d, d], axis=2)
        q = nx.concat([qp, qz], axis=1)
        k = nx.concat([kp, kz], axis=1)
        v = nx.concat([vp, vz], axis=1)
        attn = attention(q, k, v, bias, cfg.heads, probs_out)
        n_text = p.shape[1]
        ap, az = nx.split(attn, [n_text, z.shape[1]], axis=1)
        p = nx.add(p, nx.mul(tmod[2], self._linear(ap, pre + ".txt.proj")))
        z = nx.add(z, nx.mul(imod[2], self._linear(az, pre + ".img.proj")))
        hp = self._linear(nx.gelu(self._linear(self._modulate(p, tmod[3], tmod[4]), pre + ".txt.fc1")),
                          pre + ".txt.fc2")
        hz = self._linear(nx.gelu(self._linear(self._modulate(z, imod[3], imod[4]), pre + ".img.fc1")),
                          pre + ".img.fc2")
        p = nx.add(p, nx.mul(tmod[5], hp))
        z = nx.add(z, nx.mul(imod[5], hz))
        return p, z

    def single_stream_block(self, i, h, bias, vec_act, probs_out=None):
        cfg = self.cfg
        d, r = cfg.d, cfg.mlp_ratio * cfg.d
        pre = f"single.{i}"
        shift, scale_, gate = self._chunks(self._linear(vec_act, pre + ".mod"), 3)
        x = self._linear(self._modulate(h, shift, scale_), pre + ".linear1")
        q, k, v, mlp = nx.split(x, [d, d, d, r], axis=2)
        attn = attention(q, k, v, bias, cfg.heads, probs_out)
        out = self._linear(nx.concat([attn, nx.gelu(mlp)], axis=2), pre + ".linear2")
        return nx.add(h, nx.mul(gate, out))

    # -- forward ------------------------------------------------------------

    def forward(self, z, conds, sigma, capture=False):
        """Velocity for latent tokens ``z`` (B, n_z, token_dim) at noise levels ``sigma`` (B,)."""
        cfg = self.cfg
        self.forward_calls += 1
        z = nx.as_tensor(z)
        if z.ndim == 2:
            return nx.reshape(self.forward(nx.reshape(z, (1,) + z.shape), [conds], [sigma], capture), z.shape)
        B = z.shape[0]
        if len(conds) != B:
            raise ValueError("one condition per batch item required")
        if z.shape[1:] != (cfg.n_z, cfg.token_dim):
            raise ValueError(f"latent tokens {z.shape[1:]} != ({cfg.n_z}, {cfg.token_dim})")
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (B,))
        text, bias, k_max = self._prepare(conds)

        vec = self._linear(nx.silu(self._linear(timestep_embedding(sigma, cfg.d), "time.fc1")), "time.fc2")
        vec_act = nx.silu(vec)
        p = nx.add(self._linear(text, "txt_in"), np.tile(self.prompt_pos, (k_max + 1, 1)))
        x = nx.add(self._linear(z, "img_in"), self.latent_pos)

        probs = [] if capture else None
        for i in range(cfg.n_double):
            p, x = self.double_stream_block(i, p, x, bias, vec_act, probs)
        n_text = p.shape[1]
        h = nx.concat([p, x], axis=1)
        for i in range(cfg.n_single):
            h = self.single_stream_block(i, h, bias, vec_act, probs)
        x = nx.take(h, 1, n_text, n_text + cfg.n_z)

        shift, scale_ = self._chunks(self._linear(vec_act, "final.mod"), 2)
        out = self._linear(self._modulate(x, shift, scale_), "final.out")
        if capture:
            self.captured = {"probs": probs, "k": k_max, "lengths": [
                [c.global_prompt.length] + [e[0].length for e in c.entities] for c in conds]}
        return out

    def capture_attention_map(self, layer=None, entity_index=0, item=0):
        """Head- and row-averaged attention from an entity's prompt tokens to the latent grid.

        ``layer`` indexes blocks in execution order (doubles first) and defaults
        to the last double-stream block. Entity 0 is the global prompt.
        """
        if self.captured is None:
            raise RuntimeError("run forward(..., capture=True) first")
        cfg = self.cfg
        probs = self.captured["probs"]
        if layer is None:
            layer = cfg.n_double - 1
        if not 0 <= layer < len(probs):
            raise IndexError(f"layer {layer} out of range")
        lengths = self.captured["lengths"][item]
        if not 0 <= entity_index < len(lengths):
            raise IndexError(f"entity {entity_index} out of range")
        n_text = (self.captured["k"] + 1) * cfg.n_p
        lo = entity_index * cfg.n_p
        rows = max(lengths[entity_index], 1)
        block = probs[layer][item, :, lo:lo + rows, n_text:n_text + cfg.n_z]
        if lengths[entity_index] == 0:
            block = np.zeros_like(block)
        return block.mean(axis=(0, 1)).reshape(cfg.grid)

    # -- persistence --------------------------------------------------------

    def save(self, path):
        header = {"kind": "model", "config": asdict(self.cfg)}
        save_tensors(path, header, {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path):
        header, tensors = load_tensors(path)
        if header.get("kind") != "model":
            raise ValueError(f"{path} is not a model checkpoint")
        cfg = ModelConfig(**header["config"])
        model = cls(cfg)
        for name, arr in tensors.items():
            if name not in model.params or model.params[name].shape != arr.shape:
                raise ValueError(f"unexpected tensor {name} {arr.shape}")
            model.params[name].data = arr
        return model
