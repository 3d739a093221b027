"""Triple-path (and dual-path) transformer mask estimation.

Tensor layout inside the network is feature-last: the encoded mixture
(B, Q, F, T) becomes (B, Q, C, N_C, F) after chunking, and every transformer
block folds the axes it does not attend over into the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as Fn
from torch import nn

from . import autodiff as ad

BLOCK_ORDERS = {
    "ichan-first": ("interchannel", "intrachunk", "interchunk"),
    "ichan-last": ("intrachunk", "interchunk", "interchannel"),
}


@dataclass(frozen=True)
class MasknetConfig:
    n_features: int = 256  # F
    chunk_size: int = 250  # C
    repeats: int = 8  # R
    layers: int = 1  # N_L
    ff_dim: int = 1024  # N_FF
    heads: int = 8
    n_sources: int = 2  # J
    n_channels: int = 4  # Q
    block_order: str = "ichan-first"
    interchannel: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        if self.block_order not in BLOCK_ORDERS:
            raise ValueError(f"block_order must be one of {sorted(BLOCK_ORDERS)}, got {self.block_order!r}")
        if self.chunk_size % 2:
            raise ValueError(f"chunk_size must be even for 50% overlap, got {self.chunk_size}")
        if self.n_features % self.heads:
            raise ValueError(f"{self.heads} heads do not divide {self.n_features} features")
        if min(self.repeats, self.layers, self.n_sources, self.n_channels) < 1:
            raise ValueError(f"repeats, layers, sources and channels must be >= 1: {self}")

    @property
    def paths(self) -> tuple[str, ...]:
        order = BLOCK_ORDERS[self.block_order]
        return order if self.interchannel else tuple(p for p in order if p != "interchannel")


# ---------------------------------------------------------------------------
# chunking
# ---------------------------------------------------------------------------

def n_chunks(n_frames: int, chunk_size: int) -> int:
    hop = chunk_size // 2
    if n_frames <= chunk_size:
        return 1
    return -(-(n_frames - chunk_size) // hop) + 1


def chunk(x: torch.Tensor, chunk_size: int) -> torch.Tensor:
    """Split the last axis into 50%-overlapping chunks.

    (..., T) -> (..., C, N_C). The tail is zero padded so the last chunk is
    full; ``dechunk`` needs the original T to undo it.
    """
    hop = chunk_size // 2
    nc = n_chunks(x.shape[-1], chunk_size)
    padded = (nc - 1) * hop + chunk_size
    x = Fn.pad(x, (0, padded - x.shape[-1]))
    return x.unfold(-1, chunk_size, hop).transpose(-1, -2)


def dechunk(y: torch.Tensor, n_frames: int) -> torch.Tensor:
    """Inverse of ``chunk``: overlap-add, divide by the per-frame chunk count, trim.

    (..., C, N_C) -> (..., T).
    """
    c, nc = y.shape[-2:]
    hop = c // 2
    padded = (nc - 1) * hop + c
    lead = y.shape[:-2]
    flat = y.reshape(-1, c, nc)
    out = Fn.fold(flat, output_size=(1, padded), kernel_size=(1, c), stride=(1, hop))
    ones = torch.ones(1, c, nc, dtype=y.dtype, device=y.device)
    count = Fn.fold(ones, output_size=(1, padded), kernel_size=(1, c), stride=(1, hop))
    out = (out / count).reshape(*lead, padded)
    return out[..., :n_frames]


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Linear(nn.Module):
    def __init__(self, n_in, n_out, bias=True):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.weight = nn.Parameter(torch.empty(n_out, n_in).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(n_out)) if bias else None

    def forward(self, x):
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, n):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(n))
        self.bias = nn.Parameter(torch.zeros(n))

    def forward(self, x):
        return ad.layer_norm(x, self.weight, self.bias)


class PReLU(nn.Module):
    def __init__(self, init=0.25):
        super().__init__()
        self.slope = nn.Parameter(torch.full((1,), init))

    def forward(self, x):
        return ad.prelu(x, self.slope)


class Attention(nn.Module):
    def __init__(self, d_model, heads):
        super().__init__()
        self.heads = heads
        bound = 1.0 / math.sqrt(d_model)
        for name in ("q", "k", "v", "o"):
            self.register_parameter(f"w{name}", nn.Parameter(torch.empty(d_model, d_model).uniform_(-bound, bound)))
            self.register_parameter(f"b{name}", nn.Parameter(torch.zeros(d_model)))

    def forward(self, x):
        return ad.multihead_attention(
            x, x, x, self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.heads
        )


class FeedForward(nn.Module):
    def __init__(self, d_model, ff_dim):
        super().__init__()
        self.inner = Linear(d_model, ff_dim)
        self.outer = Linear(ff_dim, d_model)

    def forward(self, x):
        return self.outer(ad.relu(self.inner(x)))


class TransformerLayer(nn.Module):
    """Pre-norm layer: x + attn(norm(x)), then x + ff(norm(x))."""

    def __init__(self, d_model, ff_dim, heads, dropout=0.0):
        super().__init__()
        self.norm1 = LayerNorm(d_model)
        self.attn = Attention(d_model, heads)
        self.norm2 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, ff_dim)
        self.dropout = dropout

    def _drop(self, x):
        return Fn.dropout(x, self.dropout, self.training) if self.dropout else x

    def forward(self, x):
        x = ad.add(x, self._drop(self.attn(self.norm1(x))))
        return ad.add(x, self._drop(self.ff(self.norm2(x))))

    def zero_residual_branches(self):
        with torch.no_grad():
            for p in (self.attn.wo, self.attn.bo, self.ff.outer.weight, self.ff.outer.bias):
                p.zero_()


def sinusoidal_encoding(length: int, d_model: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    rate = torch.exp(-math.log(10000.0) * torch.arange(0, d_model, 2, dtype=torch.float64) / d_model)
    pe = torch.zeros(length, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * rate)
    pe[:, 1::2] = torch.cos(pos * rate[: d_model // 2])
    return pe.to(dtype)


class TransformerStack(nn.Module):
    """N_L transformer layers over (batch, seq, feature).

    The positional code is added on entry and subtracted on exit, so the
    stack acts as a pure residual update of its input.
    """

    def __init__(self, d_model, n_layers, ff_dim, heads, dropout=0.0):
        super().__init__()
        self.layers = nn.ModuleList(TransformerLayer(d_model, ff_dim, heads, dropout) for _ in range(n_layers))

    def forward(self, x):
        pe = sinusoidal_encoding(x.shape[1], x.shape[2], x.dtype).to(x.device)
        h = ad.add(x, pe)
        for layer in self.layers:
            h = layer(h)
        return h - pe


# (B, Q, C, N_C, F) permutations putting (batch..., sequence, feature) last
_PATH_PERMUTATION = {
    "interchannel": (0, 2, 3, 1, 4),  # batch B*C*N_C, sequence Q
    "intrachunk": (0, 1, 3, 2, 4),  # batch B*Q*N_C, sequence C
    "interchunk": (0, 1, 2, 3, 4),  # batch B*Q*C, sequence N_C
}


class TransformerBlock(nn.Module):
    """A transformer stack attending along one axis of a chunked tensor."""

    def __init__(self, path, config: MasknetConfig):
        super().__init__()
        if path not in _PATH_PERMUTATION:
            raise ValueError(f"unknown path {path!r}")
        self.path = path
        self.stack = TransformerStack(config.n_features, config.layers, config.ff_dim, config.heads, config.dropout)

    def forward(self, x):
        """x: (B, Q, C, N_C, F); shape preserved."""
        if x.dim() != 5:
            raise ad.ShapeError("transformer_block", f"expected (B, Q, C, N_C, F), got {tuple(x.shape)}")
        perm = _PATH_PERMUTATION[self.path]
        y = ad.permute(x, perm)
        folded = y.shape
        y = self.stack(y.reshape(-1, folded[-2], folded[-1]))
        return ad.permute(y.reshape(folded), ad.inverse_permutation(perm))


class Repeat(nn.Module):
    def __init__(self, config: MasknetConfig):
        super().__init__()
        self.blocks = nn.ModuleDict({p: TransformerBlock(p, config) for p in config.paths})

    def forward(self, x):
        for block in self.blocks.values():
            x = block(x)
        return x


class Masknet(nn.Module):
    """Encoded mixture (B, Q, F, T) -> nonnegative masks (B, J, Q, F, T)."""

    def __init__(self, config: MasknetConfig = MasknetConfig()):
        super().__init__()
        self.config = config
        f, j = config.n_features, config.n_sources
        self.norm = LayerNorm(f)
        self.bottleneck = Linear(f, f, bias=False)
        self.repeats = nn.ModuleList(Repeat(config) for _ in range(config.repeats))
        self.prelu = PReLU()
        self.split = Linear(f, j * f)
        self.gate_tanh = Linear(f, f)
        self.gate_sigmoid = Linear(f, f)
        self.mask = Linear(f, f, bias=False)

    def forward(self, e):
        cfg = self.config
        if e.dim() != 4 or e.shape[1] != cfg.n_channels or e.shape[2] != cfg.n_features:
            raise ad.ShapeError(
                "masknet", f"expected (B, {cfg.n_channels}, {cfg.n_features}, T), got {tuple(e.shape)}"
            )
        b, q, f, t = e.shape
        x = self.bottleneck(self.norm(e.transpose(-1, -2)))  # (B, Q, T, F)
        x = chunk(x.transpose(-1, -2), cfg.chunk_size)  # (B, Q, F, C, N_C)
        x = x.permute(0, 1, 3, 4, 2)  # (B, Q, C, N_C, F)
        for rep in self.repeats:
            x = rep(x)
        x = self.split(self.prelu(x))  # (B, Q, C, N_C, J*F)
        c, nc = x.shape[2:4]
        x = x.reshape(b, q, c, nc, cfg.n_sources, f).permute(0, 4, 1, 5, 2, 3)  # (B, J, Q, F, C, N_C)
        x = dechunk(x, t).transpose(-1, -2)  # (B, J, Q, T, F)
        x = ad.mul(ad.tanh(self.gate_tanh(x)), ad.sigmoid(self.gate_sigmoid(x)))
        return ad.relu(self.mask(x)).transpose(-1, -2)


class PostTransformer(nn.Module):
    """Single transformer layer across the J*Q estimates of each time block.

    Time is cut into non-overlapping blocks of ``block`` samples which act as
    the feature axis; the J*Q signals form the sequence.
    """

    def __init__(self, block: int, ff_dim: int, heads: int, dropout=0.0):
        super().__init__()
        self.block = block
        self.stack = TransformerStack(block, 1, ff_dim, heads, dropout)

    def forward(self, y):
        """y: (B, J, Q, N) -> (B, J, Q, N)."""
        b, j, q, n = y.shape
        n_blocks = -(-n // self.block)
        z = Fn.pad(y, (0, n_blocks * self.block - n)).reshape(b, j * q, n_blocks, self.block)
        z = z.transpose(1, 2).reshape(b * n_blocks, j * q, self.block)
        z = self.stack(z).reshape(b, n_blocks, j * q, self.block).transpose(1, 2)
        return z.reshape(b, j, q, n_blocks * self.block)[..., :n]


def transformer_layer_param_count(d_model: int, ff_dim: int) -> int:
    norms = 2 * 2 * d_model
    attention = 4 * (d_model * d_model + d_model)
    feed_forward = d_model * ff_dim + ff_dim + ff_dim * d_model + d_model
    return norms + attention + feed_forward


def masknet_param_count(config: MasknetConfig) -> int:
    """Closed-form parameter count, layer by layer."""
    f, j = config.n_features, config.n_sources
    head = 2 * f + f * f  # input norm, bottleneck (no bias)
    body = config.repeats * len(config.paths) * config.layers * transformer_layer_param_count(f, config.ff_dim)
    tail = 1 + (f * j * f + j * f) + 2 * (f * f + f) + f * f  # prelu, split, gate, mask (no bias)
    return head + body + tail
