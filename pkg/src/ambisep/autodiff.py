"""Differentiable tensor operations, gradient extraction and checking.

The reverse-mode machinery itself is torch autograd; this module pins down
the small set of operations the codec and masknet are built from, checks
their shapes, and provides an independent central-difference gradient
checker plus the parameter registry / checkpoint container.
"""

from __future__ import annotations

import io
import json
import math
import os
import warnings
import zipfile
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

CHECKPOINT_FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Raised when an op receives inputs whose shapes do not fit together."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


def _require_ndim(op, name, x, ndims):
    if x.dim() not in ndims:
        raise ShapeError(op, f"{name} must have {' or '.join(map(str, ndims))} dims, got shape {tuple(x.shape)}")


def _require_dim(op, what, got, expected):
    if got != expected:
        raise ShapeError(op, f"{what} is {got}, expected {expected}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def relu(x):
    # torch's relu backward uses the x > 0 mask, i.e. subgradient 0 at the kink
    return torch.relu(x)


def prelu(x, slope):
    """Parametric ReLU with a single learnable negative slope.

    Written as ``relu(x) - slope * relu(-x)`` so the subgradient at 0 is 0 for
    both the input and the slope.
    """
    if slope.numel() != 1:
        raise ShapeError("prelu", f"slope must have one element, got shape {tuple(slope.shape)}")
    return torch.relu(x) - slope.reshape(()) * torch.relu(-x)


def tanh(x):
    return torch.tanh(x)


def sigmoid(x):
    return torch.sigmoid(x)


def add(a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError("add", f"shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None
    return a + b


def mul(a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError("mul", f"shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None
    return a * b


def reshape(x, shape):
    shape = tuple(shape)
    known = math.prod(s for s in shape if s != -1)
    if shape.count(-1) > 1 or (-1 not in shape and known != x.numel()) or (
        -1 in shape and (known == 0 or x.numel() % known)
    ):
        raise ShapeError("reshape", f"cannot reshape {tuple(x.shape)} ({x.numel()} elements) to {shape}")
    return x.reshape(shape)


def permute(x, dims):
    dims = tuple(dims)
    if sorted(dims) != list(range(x.dim())):
        raise ShapeError("permute", f"dims {dims} are not a permutation of {x.dim()} axes")
    return x.permute(dims)


def inverse_permutation(dims: Sequence[int]) -> tuple[int, ...]:
    inv = [0] * len(dims)
    for i, d in enumerate(dims):
        inv[d] = i
    return tuple(inv)


# ---------------------------------------------------------------------------
# linear algebra and layers
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError("matmul", f"operands need >= 2 dims, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            "matmul", f"inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)} ({a.shape[-1]} vs {b.shape[-2]})"
        )
    return torch.matmul(a, b)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` along the last axis; weight is (out, in)."""
    _require_ndim("linear", "weight", weight, (2,))
    _require_dim("linear", "input feature size", x.shape[-1], weight.shape[1])
    if bias is not None:
        _require_dim("linear", "bias length", bias.numel(), weight.shape[0])
    return F.linear(x, weight, bias)


def layer_norm(x, weight, bias, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    _require_dim("layer_norm", "weight length", weight.numel(), x.shape[-1])
    _require_dim("layer_norm", "bias length", bias.numel(), x.shape[-1])
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def softmax(x, dim=-1):
    return torch.softmax(x, dim=dim)


def conv_frames(n_samples: int, kernel: int, stride: int) -> int:
    """Frame count of a valid (unpadded) strided convolution."""
    return (n_samples - kernel) // stride + 1


def conv1d(x, weight, stride):
    """Valid strided convolution of single-channel signals.

    x: (batch, N); weight: (F, 1, W). Returns (batch, F, T) with
    ``T = (N - W) // stride + 1``.
    """
    _require_ndim("conv1d", "input", x, (2,))
    _require_ndim("conv1d", "weight", weight, (3,))
    n_filters, in_ch, width = weight.shape
    _require_dim("conv1d", "weight input channels", in_ch, 1)
    if x.shape[-1] < width:
        raise ShapeError("conv1d", f"signal length {x.shape[-1]} shorter than kernel length {width}")
    return F.conv1d(x.unsqueeze(1), weight, stride=stride)


def conv1d_transpose(x, weight, stride, length=None):
    """Transposed strided convolution back to single-channel signals.

    x: (batch, F, T); weight: (F, 1, W). Output length is ``(T-1)*stride + W``
    unless ``length`` is given, in which case the result is truncated or
    zero padded to it.
    """
    _require_ndim("conv1d_transpose", "input", x, (3,))
    _require_ndim("conv1d_transpose", "weight", weight, (3,))
    _require_dim("conv1d_transpose", "input feature count", x.shape[1], weight.shape[0])
    y = F.conv_transpose1d(x, weight, stride=stride).squeeze(1)
    if length is not None:
        if y.shape[-1] >= length:
            y = y[..., :length]
        else:
            y = F.pad(y, (0, length - y.shape[-1]))
    return y


def multihead_attention(query, key, value, wq, bq, wk, bk, wv, bv, wo, bo, num_heads):
    """Scaled dot-product multi-head attention on (batch, seq, feature) tensors."""
    for name, t in (("query", query), ("key", key), ("value", value)):
        _require_ndim("multihead_attention", name, t, (3,))
    d_model = wq.shape[0]
    if d_model % num_heads:
        raise ShapeError("multihead_attention", f"model dim {d_model} not divisible by {num_heads} heads")
    if key.shape[1] != value.shape[1]:
        raise ShapeError("multihead_attention", f"key length {key.shape[1]} != value length {value.shape[1]}")
    batch, n_q, _ = query.shape
    n_k = key.shape[1]
    d_head = d_model // num_heads

    def split(t, n):
        return t.reshape(batch, n, num_heads, d_head).transpose(1, 2)

    q = split(linear(query, wq, bq), n_q)
    k = split(linear(key, wk, bk), n_k)
    v = split(linear(value, wv, bv), n_k)
    scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(d_head)
    ctx = matmul(softmax(scores, dim=-1), v)
    ctx = ctx.transpose(1, 2).reshape(batch, n_q, d_model)
    return linear(ctx, wo, bo)


_OPS: dict[str, Callable] = {
    "matmul": lambda inputs, params, **kw: matmul(*inputs),
    "conv1d": lambda inputs, params, stride, **kw: conv1d(inputs[0], params[0], stride),
    "conv1d_transpose": lambda inputs, params, stride, length=None, **kw: conv1d_transpose(
        inputs[0], params[0], stride, length
    ),
    "linear": lambda inputs, params, **kw: linear(inputs[0], *params),
    "layer_norm": lambda inputs, params, eps=1e-5, **kw: layer_norm(inputs[0], params[0], params[1], eps),
    "softmax": lambda inputs, params, dim=-1, **kw: softmax(inputs[0], dim),
    "multihead_attention": lambda inputs, params, num_heads, **kw: multihead_attention(
        *(inputs if len(inputs) == 3 else inputs * 3), *params, num_heads=num_heads
    ),
    "relu": lambda inputs, params, **kw: relu(inputs[0]),
    "prelu": lambda inputs, params, **kw: prelu(inputs[0], params[0]),
    "tanh": lambda inputs, params, **kw: tanh(inputs[0]),
    "sigmoid": lambda inputs, params, **kw: sigmoid(inputs[0]),
    "add": lambda inputs, params, **kw: add(*inputs),
    "mul": lambda inputs, params, **kw: mul(*inputs),
    "reshape": lambda inputs, params, shape, **kw: reshape(inputs[0], shape),
    "permute": lambda inputs, params, dims, **kw: permute(inputs[0], dims),
}

OP_KINDS = tuple(_OPS)


def forward_op(kind: str, inputs: Sequence[torch.Tensor], params: Sequence[torch.Tensor] = (), **attrs):
    """Evaluate one op by name.

    ``attrs`` carries op attributes: ``stride`` (conv ops), ``num_heads``
    (attention; one input means self-attention), ``shape`` (reshape),
    ``dims`` (permute), ``dim`` (softmax), ``eps`` (layer_norm).
    """
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {', '.join(OP_KINDS)}") from None
    return fn(list(inputs), list(params), **attrs)


# ---------------------------------------------------------------------------
# parameters, gradients
# ---------------------------------------------------------------------------

class ParamRegistry(Mapping[str, torch.Tensor]):
    """Flat mapping from hierarchical parameter names to tensors."""

    def __init__(self, entries: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]] = ()):
        self._entries: dict[str, torch.Tensor] = {}
        items = entries.items() if isinstance(entries, Mapping) else entries
        for name, tensor in items:
            self.add(name, tensor)

    @classmethod
    def from_module(cls, module: torch.nn.Module, prefix: str = "", trainable_only: bool = False):
        reg = cls()
        for name, p in module.named_parameters():
            if trainable_only and not p.requires_grad:
                continue
            reg.add(f"{prefix}.{name}" if prefix else name, p)
        return reg

    def add(self, name: str, tensor: torch.Tensor):
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._entries[name] = tensor

    def __getitem__(self, name):
        return self._entries[name]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    @property
    def total_count(self) -> int:
        return sum(t.numel() for t in self._entries.values())

    def count(self, prefix: str = "") -> int:
        return sum(t.numel() for n, t in self._entries.items() if n.startswith(prefix))


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss with respect to every trainable parameter.

    Parameters the loss does not depend on get zero gradients; if none of
    them is reached a warning is emitted.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    names = [n for n, p in params.items() if p.requires_grad]
    tensors = [params[n] for n in names]
    if not loss.requires_grad:
        warnings.warn("loss is detached from the graph; all gradients are zero", RuntimeWarning, stacklevel=2)
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    if tensors and all(g is None for g in grads):
        warnings.warn("loss does not depend on any parameter; all gradients are zero", RuntimeWarning, stacklevel=2)
    return {n: (torch.zeros_like(t) if g is None else g) for n, t, g in zip(names, tensors, grads)}


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    checked: int
    passed: bool
    location: tuple[int, ...] | None = None
    note: str = ""


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def __str__(self):
        lines = [f"gradient check (tolerance {self.tolerance:g})"]
        for e in self.entries:
            flag = "ok  " if e.passed else "FAIL"
            extra = f" at {e.location}" if e.location is not None and not e.passed else ""
            lines.append(f"  {flag} {e.name}: max rel err {e.max_rel_error:.3e} over {e.checked} elements{extra} {e.note}")
        return "\n".join(lines)


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    step: float = 1e-6,
    tolerance: float = 1e-4,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``fn`` re-evaluates the scalar loss from the current parameter values.
    The relative error of an element is ``|analytic - numeric|`` divided by
    the largest gradient magnitude of that parameter, so elements whose
    gradient is near zero are judged on the parameter's scale. That scale is
    floored at ``1e4 * eps * max(|loss|, 1) / step``, well above the rounding
    noise of the differences, so parameters whose true gradient vanishes
    (e.g. an attention key bias) are not judged on noise alone. Parameters
    with ``requires_grad`` false are left out of the report.
    With ``max_elements`` only a random subset of each parameter is probed.
    """
    trainable = {n: p for n, p in params.items() if p.requires_grad}
    for n, p in trainable.items():
        if p.dtype != torch.float64:
            raise TypeError(f"grad_check needs float64 parameters; {n} is {p.dtype}")
    loss0 = fn()
    analytic = backward(loss0, trainable)
    noise_floor = 1e4 * np.finfo(np.float64).eps * max(abs(float(loss0.detach())), 1.0) / step
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    with torch.no_grad():
        for name, p in trainable.items():
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_elements is not None and flat.numel() > max_elements:
                idx = np.sort(rng.choice(flat.numel(), max_elements, replace=False))
            numeric = np.empty(len(idx))
            bad = None
            for i, k in enumerate(idx):
                orig = flat[k].item()
                flat[k] = orig + step
                up = fn().item()
                flat[k] = orig - step
                down = fn().item()
                flat[k] = orig
                numeric[i] = (up - down) / (2 * step)
                if not math.isfinite(numeric[i]) and bad is None:
                    bad = k
            a = analytic[name].reshape(-1).detach().cpu().numpy()[idx]
            if bad is not None:
                loc = tuple(int(v) for v in np.unravel_index(bad, tuple(p.shape)))
                report.entries.append(GradCheckEntry(name, math.inf, len(idx), False, loc, "non-finite difference"))
                continue
            scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), noise_floor)
            rel = np.abs(a - numeric) / scale
            worst = int(np.argmax(rel))
            loc = tuple(int(v) for v in np.unravel_index(idx[worst], tuple(p.shape)))
            report.entries.append(GradCheckEntry(name, float(rel[worst]), len(idx), bool(rel[worst] < tolerance), loc))
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: Mapping[str, torch.Tensor], meta: dict | None = None):
    """Write parameters as little-endian float32 arrays in an .npz container.

    The write goes to a temporary file first and is renamed into place.
    """
    arrays = {name: t.detach().cpu().numpy().astype("<f4") for name, t in params.items()}
    header = {"format_version": CHECKPOINT_FORMAT_VERSION, "meta": meta or {}}
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        with zipfile.ZipFile(fh, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr("header.json", json.dumps(header, sort_keys=True))
            for name, arr in arrays.items():
                buf = io.BytesIO()
                np.save(buf, arr, allow_pickle=False)
                zf.writestr(f"params/{name}.npy", buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format version {header.get('format_version')!r}")
        params = {}
        for info in zf.infolist():
            if info.filename.startswith("params/") and info.filename.endswith(".npy"):
                name = info.filename[len("params/"):-len(".npy")]
                params[name] = np.load(io.BytesIO(zf.read(info)), allow_pickle=False)
    return params, header["meta"]
