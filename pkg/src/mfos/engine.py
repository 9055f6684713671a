"""Dense-array primitives with reverse-mode gradients.

Arrays are ``torch.Tensor``; reverse accumulation comes from torch autograd.
The transformer arithmetic itself (attention, rotary embeddings, layer norm,
GELU, view packing) is written out here so that its semantics, and the
zero-copy packing in particular, stay explicit and testable.
"""
from __future__ import annotations

import contextlib
import io
import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
import torch

from .errors import NoGradPath, ParseError, ShapeMismatch

Tensor = torch.Tensor

LN_EPS = 1e-6
ROPE_BASE = 100.0


def set_threads_from_env() -> int:
    n = int(os.environ.get("MFOS_THREADS", "0") or 0)
    if n > 0:
        torch.set_num_threads(n)
    return torch.get_num_threads()


# --------------------------------------------------------------------------
# allocation accounting

class AllocationCounter:
    """Records tensors produced by key/value projections inside :func:`attn`.

    Used to check that packed cross-attention never materializes a copy of the
    reference features per query view.
    """

    _active: list["AllocationCounter"] = []

    def __init__(self):
        self.records: list[tuple[str, tuple[int, ...]]] = []

    def __enter__(self):
        AllocationCounter._active.append(self)
        return self

    def __exit__(self, *exc):
        AllocationCounter._active.remove(self)

    def numel(self, tag: str) -> int:
        return sum(math.prod(s) for t, s in self.records if t == tag)

    def count(self, tag: str) -> int:
        return sum(1 for t, _ in self.records if t == tag)


def _record(tag: str, t: Tensor) -> None:
    for c in AllocationCounter._active:
        c.records.append((tag, tuple(t.shape)))


# --------------------------------------------------------------------------
# primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x - x.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeMismatch(f"layer_norm: channels {x.shape[-1]} vs gain {tuple(gain.shape)}")
    mu = x.mean(dim=-1, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(dim=-1, keepdim=True)
    return xc / torch.sqrt(var + eps) * gain + bias


def gelu(x: Tensor) -> Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"linear: input {tuple(x.shape)} vs weight {tuple(w.shape)}")
    y = x @ w
    return y if b is None else y + b


# --------------------------------------------------------------------------
# rotary embeddings on a 2-D patch grid

def grid_positions(rows: int, cols: int) -> Tensor:
    r, c = torch.meshgrid(torch.arange(rows), torch.arange(cols), indexing="ij")
    return torch.stack([r.reshape(-1), c.reshape(-1)], dim=-1)


def _rope_tables(positions: Tensor, axis_dim: int, base: float, dtype) -> tuple[Tensor, Tensor]:
    half = axis_dim // 2
    inv = base ** (-torch.arange(half, dtype=torch.float64) * 2.0 / axis_dim)
    ang = positions.to(torch.float64)[..., None] * inv  # (..., S, 2, half)
    ang = torch.cat([ang, ang], dim=-1)  # (..., S, 2, axis_dim)
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def _rotate_half(x: Tensor) -> Tensor:
    h = x.shape[-1] // 2
    return torch.cat([-x[..., h:], x[..., :h]], dim=-1)


def rope_apply(x: Tensor, positions: Tensor, base: float = ROPE_BASE) -> Tensor:
    """Rotate channel pairs of ``x`` (..., S, hd) by angles set by 2-D ``positions`` (S, 2).

    The first half of the head dimension encodes the row, the second the
    column. Within an axis block of width d, channel i pairs with i + d/2 and
    turns by ``pos * base**(-2j/d)``.
    """
    hd = x.shape[-1]
    if hd % 4:
        raise ShapeMismatch(f"rope: head dim {hd} not divisible by 4")
    if positions.shape[-2] != x.shape[-2] or positions.shape[-1] != 2:
        raise ShapeMismatch(f"rope: positions {tuple(positions.shape)} for {x.shape[-2]} tokens")
    ad = hd // 2
    cos, sin = _rope_tables(positions, ad, base, x.dtype)
    parts = []
    for axis in range(2):
        xa = x[..., axis * ad:(axis + 1) * ad]
        parts.append(xa * cos[..., axis, :] + _rotate_half(xa) * sin[..., axis, :])
    return torch.cat(parts, dim=-1)


# --------------------------------------------------------------------------
# attention

ATTN_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, s, d = t.shape
    return t.reshape(b, s, heads, d // heads).transpose(1, 2)


def attn(x: Tensor, y: Tensor, p: dict, heads: int, pos_x: Tensor, pos_y: Tensor,
         rope_base: float = ROPE_BASE, return_probs: bool = False):
    """Multi-head attention of ``x`` (B, S, D) over ``y`` (B, S', D).

    Queries come from ``x``, keys and values from ``y``; rotary embeddings are
    applied to queries and keys with their own 2-D positions.
    """
    if x.ndim != 3 or y.ndim != 3:
        raise ShapeMismatch(f"attn expects 3-D inputs, got {tuple(x.shape)} and {tuple(y.shape)}")
    b, s, d = x.shape
    if y.shape[0] != b or y.shape[2] != d:
        raise ShapeMismatch(f"attn: x {tuple(x.shape)} vs y {tuple(y.shape)}")
    if d % heads:
        raise ShapeMismatch(f"attn: dim {d} not divisible by {heads} heads")
    q = _split_heads(linear(x, p["wq"], p["bq"]), heads)
    k = linear(y, p["wk"], p["bk"])
    v = linear(y, p["wv"], p["bv"])
    _record("k", k)
    _record("v", v)
    k = _split_heads(k, heads)
    v = _split_heads(v, heads)
    q = rope_apply(q, pos_x, rope_base)
    k = rope_apply(k, pos_y, rope_base)
    scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(d // heads)
    probs = softmax_lastdim(scores)
    out = matmul(probs, v).transpose(1, 2).reshape(b, s, d)
    out = linear(out, p["wo"], p["bo"])
    return (out, probs) if return_probs else out


# --------------------------------------------------------------------------
# view packing: pure relabelings of (batch, view, token) axes

def _check4(x: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeMismatch(f"expected (B, N, S, D), got {tuple(x.shape)}")
    if not x.is_contiguous():
        raise ShapeMismatch("packing requires a contiguous tensor")


def pack_batch(x: Tensor) -> Tensor:
    """(B, N, S, D) -> (B*N, S, D), no copy."""
    _check4(x)
    b, n, s, d = x.shape
    return x.view(b * n, s, d)


def unpack_batch(x: Tensor, n: int) -> Tensor:
    bn, s, d = x.shape
    if bn % n:
        raise ShapeMismatch(f"cannot unpack {bn} rows into groups of {n}")
    return x.view(bn // n, n, s, d)


def pack_seq(x: Tensor) -> Tensor:
    """(B, N, S, D) -> (B, N*S, D), no copy."""
    _check4(x)
    b, n, s, d = x.shape
    return x.view(b, n * s, d)


def unpack_seq(x: Tensor, n: int) -> Tensor:
    b, ns, d = x.shape
    if ns % n:
        raise ShapeMismatch(f"cannot unpack {ns} tokens into {n} views")
    return x.view(b, n, ns // n, d)


def shares_storage(a: Tensor, b: Tensor) -> bool:
    return a.untyped_storage().data_ptr() == b.untyped_storage().data_ptr()


# --------------------------------------------------------------------------
# parameters and optimization

@dataclass
class ParamStore:
    params: dict[str, Tensor] = field(default_factory=dict)
    grads: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: Tensor) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = value.detach().clone().requires_grad_(True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def group(self, prefix: str) -> dict[str, Tensor]:
        """Parameters under ``prefix.``, keyed by the remaining suffix."""
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def numel(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def to(self, dtype) -> "ParamStore":
        out = ParamStore(step=self.step)
        for k, p in self.params.items():
            out.params[k] = p.detach().to(dtype).requires_grad_(True)
        for k, t in self.m.items():
            out.m[k] = t.to(dtype)
        for k, t in self.v.items():
            out.v[k] = t.to(dtype)
        return out


def backward(loss: Tensor, store: ParamStore) -> dict[str, Tensor]:
    """Fill ``store.grads`` with d(loss)/d(param); unused parameters get zeros."""
    if loss.numel() != 1:
        raise ShapeMismatch(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise NoGradPath("loss does not depend on any parameter")
    names = list(store.params)
    gs = torch.autograd.grad(loss, [store.params[n] for n in names], allow_unused=True)
    if all(g is None for g in gs):
        raise NoGradPath("loss does not depend on any parameter")
    store.grads = {n: (torch.zeros_like(store.params[n]) if g is None else g)
                   for n, g in zip(names, gs)}
    return store.grads


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float,
              warmup_frac: float) -> float:
    """Linear warmup, then cosine decay from ``base_lr`` to ``min_lr``."""
    warm = int(round(warmup_frac * total_steps))
    if warm > 0 and step < warm:
        return base_lr * (step + 1) / warm
    span = max(total_steps - warm, 1)
    prog = min(max(step - warm, 0) / span, 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * prog))


def decays(name: str, p: Tensor) -> bool:
    # biases, norm gains and 1-D tensors are exempt from weight decay
    return p.ndim >= 2


@torch.no_grad()
def adamw_step(store: ParamStore, lr: float, betas=(0.9, 0.95), weight_decay: float = 0.05,
               eps: float = 1e-8) -> None:
    b1, b2 = betas
    store.step += 1
    c1 = 1.0 - b1 ** store.step
    c2 = 1.0 - b2 ** store.step
    for name, p in store.params.items():
        g = store.grads.get(name)
        if g is None:
            continue
        m = store.m.setdefault(name, torch.zeros_like(p))
        v = store.v.setdefault(name, torch.zeros_like(p))
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        if weight_decay and decays(name, p):
            p.mul_(1.0 - lr * weight_decay)
        p.addcdiv_(m / c1, (v / c2).sqrt_().add_(eps), value=-lr)


# --------------------------------------------------------------------------
# finite differences

def fd_gradient(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``fn()`` w.r.t. ``x`` (perturbed in place)."""
    g = torch.zeros_like(x, dtype=torch.float64)
    flat = x.data.view(-1)
    gflat = g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            fp = float(fn())
            flat[i] = old - h
            fm = float(fn())
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(a: Tensor, b: Tensor, floor: float = 1e-12) -> float:
    """max |a - b| relative to the larger of max |a| and max |b|."""
    a = a.detach().to(torch.float64)
    b = b.detach().to(torch.float64)
    scale = max(float(a.abs().max()), float(b.abs().max()), floor)
    return float((a - b).abs().max()) / scale


def fd_entries(fn: Callable[[], Tensor], x: Tensor, idx, h: float = 1e-5) -> Tensor:
    """Central differences of scalar ``fn()`` at selected flat indices of ``x``."""
    flat = x.data.view(-1)
    out = torch.zeros(len(idx), dtype=torch.float64)
    with torch.no_grad():
        for j, i in enumerate(idx):
            old = flat[i].item()
            flat[i] = old + h
            fp = float(fn())
            flat[i] = old - h
            fm = float(fn())
            flat[i] = old
            out[j] = (fp - fm) / (2.0 * h)
    return out


# --------------------------------------------------------------------------
# checkpoint container
#
#   magic   16 bytes  b"MFOS-CKPT\0\0\0\0\0\0\0"
#   version u32
#   hlen    u32, then hlen bytes of UTF-8 JSON header
#   count   u32, then ``count`` records:
#       nlen u32, name (UTF-8), ndim u32, dims u32 * ndim, payload f32 little-endian
# All integers little-endian.

CKPT_MAGIC = b"MFOS-CKPT" + b"\0" * 7
CKPT_VERSION = 1


def write_records(f, records: dict[str, Tensor]) -> None:
    f.write(struct.pack("<I", len(records)))
    for name, t in records.items():
        nb = name.encode()
        arr = t.detach().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        f.write(struct.pack("<I", len(nb)))
        f.write(nb)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_records(f) -> dict[str, Tensor]:
    (count,) = struct.unpack("<I", f.read(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", f.read(4))
        name = f.read(nlen).decode()
        (ndim,) = struct.unpack("<I", f.read(4))
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        n = math.prod(shape)
        buf = f.read(4 * n)
        if len(buf) != 4 * n:
            raise ParseError(f"truncated payload for {name!r}")
        out[name] = torch.from_numpy(np.frombuffer(buf, dtype="<f4").reshape(shape).copy())
    return out


def save_checkpoint(path, store: ParamStore, header: dict) -> None:
    header = dict(header, step=store.step)
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(hb)))
        f.write(hb)
        write_records(f, store.params)
        write_records(f, {k: store.m[k] for k in store.params if k in store.m})
        write_records(f, {k: store.v[k] for k in store.params if k in store.v})


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    f = io.BytesIO(data)
    if f.read(16) != CKPT_MAGIC:
        raise ParseError(f"{path}: not an mfos checkpoint")
    version, hlen = struct.unpack("<II", f.read(8))
    if version != CKPT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(f.read(hlen).decode())
    store = ParamStore(step=int(header.get("step", 0)))
    for k, t in read_records(f).items():
        store.params[k] = t.requires_grad_(True)
    store.m = read_records(f)
    store.v = read_records(f)
    return store, header


@contextlib.contextmanager
def default_dtype(dtype):
    old = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(old)
