"""Neural building blocks in float64 on top of torch autograd.

Weights are stored input-major (``x @ W + b``). Masked logits use a finite
sentinel; :func:`softmax` turns anything at or below ``MASK_THRESHOLD`` into
an exact zero so masked slots carry neither probability nor gradient.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from antrip.errors import DataError

DTYPE = torch.float64
MASK_VALUE = -1e9
MASK_THRESHOLD = -1e8
BN_MOMENTUM = 0.1


def _check_inner(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    _check_inner(x, weight, "linear")
    out = x @ weight
    if bias is not None:
        if bias.shape != weight.shape[1:]:
            raise ValueError(f"linear: bias shape {tuple(bias.shape)} vs weight {tuple(weight.shape)}")
        out = out + bias
    return out


def _masked(x: Tensor) -> tuple[Tensor, Tensor]:
    dead = x <= MASK_THRESHOLD
    if bool(dead.all(dim=-1).any()):
        raise ValueError("fully masked distribution")
    return x.masked_fill(dead, -math.inf), dead


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    if dim not in (-1, x.dim() - 1):
        x = x.transpose(dim, -1)
        return softmax(x, -1).transpose(dim, -1)
    live, _ = _masked(x)
    return torch.softmax(live, dim=-1)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-probabilities; masked entries come out as ``-inf``."""
    live, _ = _masked(x)
    return torch.log_softmax(live, dim=-1)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d_h)) v over the last two dims; ``mask`` is True where attention is blocked."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(
            f"attention: shape mismatch q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}"
        )
    if mask is None:
        # nothing can be masked: torch's fused kernel computes the same softmax(q k^T / sqrt(d_h)) v
        return F.scaled_dot_product_attention(q, k, v)
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return softmax(logits.masked_fill(mask, MASK_VALUE)) @ v


def init_uniform_(t: Tensor, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        return t.uniform_(-bound, bound)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(init_uniform_(torch.empty(d_in, d_out, dtype=DTYPE), d_in))
        self.bias = nn.Parameter(init_uniform_(torch.empty(d_out, dtype=DTYPE), d_in)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Embedding(nn.Module):
    def __init__(self, n: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter(init_uniform_(torch.empty(n, dim, dtype=DTYPE), dim))

    def forward(self, idx: Tensor) -> Tensor:
        return self.weight[idx]


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., n, d) -> (..., heads, n, d / heads)."""
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).transpose(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    *lead, heads, n, dh = x.shape
    return x.transpose(-2, -3).reshape(*lead, n, heads * dh)


class MultiHeadAttention(nn.Module):
    """Self-attention; head ``i`` uses columns ``i*d_h:(i+1)*d_h`` of the projections."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"model width {d} not divisible by {heads} heads")
        self.heads = heads
        self.w_q = Linear(d, d, bias=False)
        self.w_k = Linear(d, d, bias=False)
        self.w_v = Linear(d, d, bias=False)
        self.w_o = Linear(d, d, bias=False)

    def forward(self, h: Tensor) -> Tensor:
        q, k, v = (split_heads(w(h), self.heads) for w in (self.w_q, self.w_k, self.w_v))
        return self.w_o(merge_heads(scaled_dot_attention(q, k, v)))


class BatchNorm(nn.Module):
    """Batch normalisation over every row of a (..., d) tensor, i.e. across the candidate set."""

    def __init__(self, d: int):
        super().__init__()
        self.bn = nn.BatchNorm1d(d, momentum=BN_MOMENTUM, dtype=DTYPE)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(x.reshape(-1, x.shape[-1])).reshape(x.shape)


class FeedForward(nn.Module):
    def __init__(self, d: int, d_inner: int):
        super().__init__()
        self.fc1 = Linear(d, d_inner)
        self.fc2 = Linear(d_inner, d)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.relu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, d_inner: int):
        super().__init__()
        self.mha = MultiHeadAttention(d, heads)
        self.bn1 = BatchNorm(d)
        self.ffn = FeedForward(d, d_inner)
        self.bn2 = BatchNorm(d)

    def forward(self, h: Tensor) -> Tensor:
        h = self.bn1(h + self.mha(h))
        return self.bn2(h + self.ffn(h))


class GRUCell(nn.Module):
    """h' = (1 - z) * h + z * tanh(W_n x + b_n + r * (U_n h + c_n))."""

    def __init__(self, d_in: int, d_hidden: int):
        super().__init__()
        self.x2g = Linear(d_in, 3 * d_hidden)
        self.h2g = Linear(d_hidden, 3 * d_hidden)
        self.d_hidden = d_hidden

    def forward(self, x: Tensor, h: Tensor) -> Tensor:
        xz, xr, xn = self.x2g(x).chunk(3, dim=-1)
        hz, hr, hn = self.h2g(h).chunk(3, dim=-1)
        z = torch.sigmoid(xz + hz)
        r = torch.sigmoid(xr + hr)
        cand = torch.tanh(xn + r * hn)
        return (1.0 - z) * h + z * cand


def backward(loss: Tensor) -> None:
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def make_adam(params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps, foreach=False)


def adam_step(opt: torch.optim.Optimizer, loss: Tensor) -> None:
    """Backward, one Adam update, clear gradients."""
    opt.zero_grad(set_to_none=True)
    backward(loss)
    opt.step()
    opt.zero_grad(set_to_none=True)


def assert_finite(module: nn.Module) -> None:
    for name, t in module.state_dict().items():
        if t.is_floating_point() and not bool(torch.isfinite(t).all()):
            raise FloatingPointError(f"non-finite values in {name}")


# --------------------------------------------------------------------------- checkpoints

MAGIC = b"ANT1"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, tensors: dict[str, Tensor], meta: dict | None = None) -> None:
    """Binary layout (little-endian): magic, u32 version, u32 meta length, meta JSON,
    u32 block count, then per block: u32 name length, name, u32 rank, u64 dims, f64 values."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        raw = name.encode()
        arr = t.detach().to(torch.float64).contiguous().cpu().numpy()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, Tensor]]:
    import numpy as np

    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not an ANT1 checkpoint")
    try:
        version, meta_len = struct.unpack_from("<II", buf, 4)
        if version != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        meta = json.loads(buf[pos : pos + meta_len])
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode()
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            n = math.prod(dims)
            arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims)
            pos += 8 * n
            tensors[name] = torch.from_numpy(arr.astype(np.float64))
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return meta, tensors


def load_state(module: nn.Module, tensors: dict[str, Tensor]) -> None:
    """Load float64 blocks into ``module``, casting integer buffers back."""
    own = module.state_dict()
    missing = set(own) - set(tensors)
    if missing:
        raise DataError(f"checkpoint lacks parameters: {sorted(missing)}")
    module.load_state_dict({k: tensors[k].to(own[k].dtype) for k in own})
