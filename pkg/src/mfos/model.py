"""The query/reference transformer: image encoder, pose encoder, decoder, head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
import torch

from . import engine as E
from .errors import ShapeMismatch

Tensor = torch.Tensor


@dataclass(frozen=True)
class ModelConfig:
    img_res: int = 64
    patch: int = 8
    dim: int = 64
    heads: int = 4
    enc_depth: int = 2
    dec_depth: int = 2
    posenc_vit_depth: int = 1
    posenc_dec_depth: int = 2
    mlp_ratio: int = 4
    rope_base: float = E.ROPE_BASE
    max_refs: int = 256

    def __post_init__(self):
        if self.img_res % self.patch:
            raise ValueError(f"img_res {self.img_res} not divisible by patch {self.patch}")
        if self.dim % (4 * self.heads):
            raise ValueError(f"dim {self.dim} not divisible by 4*heads={4 * self.heads}")

    @property
    def grid(self) -> int:
        return self.img_res // self.patch

    @property
    def tokens(self) -> int:
        return self.grid ** 2

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


PRESETS = {
    "paper": ModelConfig(img_res=224, patch=16, dim=768, heads=12, enc_depth=12, dec_depth=12,
                         posenc_vit_depth=1, posenc_dec_depth=4),
    "toy": ModelConfig(),
}


@dataclass
class PredictionMaps:
    coords: Tensor  # (..., H, W, 3)
    conf_raw: Tensor  # (..., H, W)

    @classmethod
    def from_channels(cls, out: Tensor) -> "PredictionMaps":
        return cls(out[..., :3], out[..., 3])


# --------------------------------------------------------------------------
# patch layout

def patchify(x: Tensor, p: int) -> Tensor:
    """(N, H, W, C) -> (N, (H/p)*(W/p), p*p*C); patches row-major, pixels (y, x, c) inside."""
    n, h, w, c = x.shape
    if h % p or w % p:
        raise ShapeMismatch(f"image {h}x{w} not divisible by patch {p}")
    x = x.reshape(n, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(n, (h // p) * (w // p), p * p * c)


def unpatchify(t: Tensor, p: int, h: int, w: int) -> Tensor:
    n, s, k = t.shape
    c = k // (p * p)
    if s * p * p != h * w or c * p * p != k:
        raise ShapeMismatch(f"cannot unpatchify {tuple(t.shape)} into {h}x{w} with patch {p}")
    t = t.reshape(n, h // p, w // p, p, p, c).permute(0, 1, 3, 2, 4, 5)
    return t.reshape(n, h, w, c)


# --------------------------------------------------------------------------
# parameter construction

def _trunc(gen, shape, std=0.02):
    t = torch.empty(shape)
    torch.nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std, generator=gen)
    return t


def _add_linear(store, gen, name, fan_in, fan_out):
    store.add(f"{name}.w", _trunc(gen, (fan_in, fan_out)))
    store.add(f"{name}.b", torch.zeros(fan_out))


def _add_norm(store, name, d):
    store.add(f"{name}.g", torch.ones(d))
    store.add(f"{name}.b", torch.zeros(d))


def _add_attn(store, gen, name, d):
    for x in "qkvo":
        store.add(f"{name}.w{x}", _trunc(gen, (d, d)))
        store.add(f"{name}.b{x}", torch.zeros(d))


def _add_mlp(store, gen, name, d, hidden):
    _add_linear(store, gen, f"{name}.fc1", d, hidden)
    _add_linear(store, gen, f"{name}.fc2", hidden, d)


def _add_enc_block(store, gen, name, d, hidden):
    _add_norm(store, f"{name}.ln1", d)
    _add_attn(store, gen, f"{name}.attn", d)
    _add_norm(store, f"{name}.ln2", d)
    _add_mlp(store, gen, f"{name}.mlp", d, hidden)


def _add_dec_block(store, gen, name, d, hidden):
    _add_norm(store, f"{name}.ln1", d)
    _add_attn(store, gen, f"{name}.self", d)
    _add_norm(store, f"{name}.ln2", d)
    _add_norm(store, f"{name}.ln_y", d)
    _add_attn(store, gen, f"{name}.cross", d)
    _add_norm(store, f"{name}.ln3", d)
    _add_mlp(store, gen, f"{name}.mlp", d, hidden)


def init_params(cfg: ModelConfig, seed: int = 0) -> E.ParamStore:
    gen = torch.Generator().manual_seed(seed)
    store = E.ParamStore()
    d, hid, pp = cfg.dim, cfg.dim * cfg.mlp_ratio, cfg.patch ** 2
    _add_linear(store, gen, "enc.patch", pp * 3, d)
    for i in range(cfg.enc_depth):
        _add_enc_block(store, gen, f"enc.blocks.{i}", d, hid)
    _add_norm(store, "enc.norm", d)
    _add_linear(store, gen, "pose.patch", pp * 3, d)
    for i in range(cfg.posenc_vit_depth):
        _add_enc_block(store, gen, f"pose.vit.{i}", d, hid)
    _add_norm(store, "pose.vit_norm", d)
    for i in range(cfg.posenc_dec_depth):
        _add_dec_block(store, gen, f"pose.dec.{i}", d, hid)
    _add_norm(store, "pose.norm", d)
    for i in range(cfg.dec_depth):
        _add_dec_block(store, gen, f"dec.blocks.{i}", d, hid)
    _add_norm(store, "dec.norm", d)
    _add_linear(store, gen, "head", d, pp * 4)
    return store


# --------------------------------------------------------------------------
# blocks

def _ln(store, name, x):
    return E.layer_norm(x, store[f"{name}.g"], store[f"{name}.b"])


def _mlp(store, name, x):
    h = E.gelu(E.linear(x, store[f"{name}.fc1.w"], store[f"{name}.fc1.b"]))
    return E.linear(h, store[f"{name}.fc2.w"], store[f"{name}.fc2.b"])


def _attn_params(store, name):
    return {k: store[f"{name}.{k}"] for k in E.ATTN_KEYS}


class MFOS:
    """Network wrapper around a :class:`~mfos.engine.ParamStore`.

    Token tensors are (views, S, D) for the encoders and (B, N, S, D) for the
    decoder, where S = (img_res / patch)^2.
    """

    def __init__(self, cfg: ModelConfig, store: E.ParamStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.store = store if store is not None else init_params(cfg, seed)
        self.pos = E.grid_positions(cfg.grid, cfg.grid)

    # -- generic blocks ---------------------------------------------------
    def _enc_block(self, name, x):
        s, h = self.store, self.cfg.heads
        y = _ln(s, f"{name}.ln1", x)
        x = x + E.attn(y, y, _attn_params(s, f"{name}.attn"), h, self.pos, self.pos,
                       self.cfg.rope_base)
        return x + _mlp(s, f"{name}.mlp", _ln(s, f"{name}.ln2", x))

    def _dec_block_unpacked(self, name, x, y, pos_y):
        """Decoder block on (B, S, D) queries against (B, S', D) memory."""
        s, h = self.store, self.cfg.heads
        q = _ln(s, f"{name}.ln1", x)
        x = x + E.attn(q, q, _attn_params(s, f"{name}.self"), h, self.pos, self.pos,
                       self.cfg.rope_base)
        x = x + E.attn(_ln(s, f"{name}.ln2", x), _ln(s, f"{name}.ln_y", y),
                       _attn_params(s, f"{name}.cross"), h, self.pos, pos_y, self.cfg.rope_base)
        return x + _mlp(s, f"{name}.mlp", _ln(s, f"{name}.ln3", x))

    def _dec_block_packed(self, name, x, y):
        """Decoder block with views packed: x (B, NQ, S, D), y (B, NR, S, D)."""
        s, h, base = self.store, self.cfg.heads, self.cfg.rope_base
        nq, nr = x.shape[1], y.shape[1]
        xb = E.pack_batch(x)
        q = _ln(s, f"{name}.ln1", xb)
        xb = xb + E.attn(q, q, _attn_params(s, f"{name}.self"), h, self.pos, self.pos, base)
        xs = E.pack_seq(E.unpack_batch(xb, nq))
        ys = _ln(s, f"{name}.ln_y", E.pack_seq(y))
        xs = xs + E.attn(_ln(s, f"{name}.ln2", xs), ys, _attn_params(s, f"{name}.cross"), h,
                         self.pos.repeat(nq, 1), self.pos.repeat(nr, 1), base)
        xb = E.pack_batch(E.unpack_seq(xs, nq))
        xb = xb + _mlp(s, f"{name}.mlp", _ln(s, f"{name}.ln3", xb))
        return E.unpack_batch(xb, nq)

    # -- stages -----------------------------------------------------------
    def _check_images(self, x):
        r = self.cfg.img_res
        if x.ndim != 4 or x.shape[1:] != (r, r, 3):
            raise ShapeMismatch(f"expected (N, {r}, {r}, 3) input, got {tuple(x.shape)}")

    def encode_image(self, img: Tensor) -> Tensor:
        """(N, H, W, 3) images in [0, 1] -> (N, S, D) tokens."""
        self._check_images(img)
        s = self.store
        x = E.linear(patchify((img - 0.5) / 0.5, self.cfg.patch), s["enc.patch.w"], s["enc.patch.b"])
        for i in range(self.cfg.enc_depth):
            x = self._enc_block(f"enc.blocks.{i}", x)
        return _ln(s, "enc.norm", x)

    def encode_pose(self, feat: Tensor, posemap: Tensor) -> Tensor:
        """Fuse (N, S, D) image tokens with (N, H, W, 3) rendered reference coordinates."""
        self._check_images(posemap)
        if feat.ndim != 3 or feat.shape[0] != posemap.shape[0] or feat.shape[1] != self.cfg.tokens:
            raise ShapeMismatch(f"features {tuple(feat.shape)} vs pointmaps {tuple(posemap.shape)}")
        s = self.store
        p = E.linear(patchify(posemap, self.cfg.patch), s["pose.patch.w"], s["pose.patch.b"])
        for i in range(self.cfg.posenc_vit_depth):
            p = self._enc_block(f"pose.vit.{i}", p)
        p = _ln(s, "pose.vit_norm", p)
        x = feat
        for i in range(self.cfg.posenc_dec_depth):
            x = self._dec_block_unpacked(f"pose.dec.{i}", x, p, self.pos)
        return _ln(s, "pose.norm", x)

    def decode(self, fq: Tensor, fr: Tensor) -> Tensor:
        """(B, NQ, S, D) queries against (B, NR, S, D) pose-augmented references."""
        if fq.ndim != 4 or fr.ndim != 4 or fq.shape[0] != fr.shape[0] \
                or fq.shape[2:] != fr.shape[2:]:
            raise ShapeMismatch(f"decode: queries {tuple(fq.shape)} vs refs {tuple(fr.shape)}")
        x = fq.contiguous()
        y = fr.contiguous()
        for i in range(self.cfg.dec_depth):
            x = self._dec_block_packed(f"dec.blocks.{i}", x, y)
        return _ln(self.store, "dec.norm", x)

    def decode_naive(self, fq: Tensor, fr: Tensor) -> Tensor:
        """Reference formulation: every query view gets its own expanded copy of the references."""
        b, nq, sq, d = fq.shape
        nr = fr.shape[1]
        x = fq.reshape(b * nq, sq, d)
        y = fr[:, None].expand(b, nq, nr, sq, d).reshape(b * nq, nr * sq, d)
        pos_y = self.pos.repeat(nr, 1)
        for i in range(self.cfg.dec_depth):
            x = self._dec_block_unpacked(f"dec.blocks.{i}", x, y, pos_y)
        return _ln(self.store, "dec.norm", x).reshape(b, nq, sq, d)

    def head(self, tokens: Tensor) -> PredictionMaps:
        """(..., S, D) tokens -> per-pixel coordinates and raw confidence."""
        lead = tokens.shape[:-2]
        r, p = self.cfg.img_res, self.cfg.patch
        if tokens.shape[-2] * p * p != r * r:
            raise ShapeMismatch(f"head: {tokens.shape[-2]} tokens do not tile {r}x{r}")
        t = E.linear(tokens.reshape(-1, *tokens.shape[-2:]), self.store["head.w"],
                     self.store["head.b"])
        out = unpatchify(t, p, r, r).reshape(*lead, r, r, 4)
        return PredictionMaps.from_channels(out)

    # -- full passes ------------------------------------------------------
    def reference_features(self, r_img: Tensor, r_map: Tensor) -> Tensor:
        """(B, NR, H, W, 3) images and pointmaps -> (B, NR, S, D)."""
        b, nr = r_img.shape[:2]
        flat = r_img.reshape(b * nr, *r_img.shape[2:])
        f = self.encode_pose(self.encode_image(flat), r_map.reshape(b * nr, *r_map.shape[2:]))
        return f.reshape(b, nr, *f.shape[1:])

    def forward_batch(self, q_img: Tensor, r_img: Tensor, r_map: Tensor) -> PredictionMaps:
        """Batched pass: queries (B, NQ, H, W, 3); references and pointmaps (B, NR, H, W, 3)."""
        b, nq = q_img.shape[:2]
        if r_img.shape[1] > self.cfg.max_refs:
            raise ShapeMismatch(f"{r_img.shape[1]} references exceed max_refs={self.cfg.max_refs}")
        fq = self.encode_image(q_img.reshape(b * nq, *q_img.shape[2:]))
        fq = fq.reshape(b, nq, *fq.shape[1:])
        fr = self.reference_features(r_img, r_map)
        return self.head(self.decode(fq, fr))

    def forward(self, query_img, refs: Sequence) -> PredictionMaps:
        """One query (H, W, 3) against ``refs``, a list of (image, pointmap coords) pairs."""
        if not 1 <= len(refs) <= self.cfg.max_refs:
            raise ShapeMismatch(f"need 1..{self.cfg.max_refs} references, got {len(refs)}")
        dt = self.store["head.w"].dtype
        q = _as_tensor(query_img, dt)[None, None]
        ri = torch.stack([_as_tensor(im, dt) for im, _ in refs])[None]
        rm = torch.stack([_as_tensor(getattr(pm, "coords", pm), dt) for _, pm in refs])[None]
        out = self.forward_batch(q, ri, rm)
        return PredictionMaps(out.coords[0, 0], out.conf_raw[0, 0])


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)

