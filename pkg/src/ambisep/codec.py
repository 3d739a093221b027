"""Learned time-feature encoder/decoder shared across channels."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import autodiff as ad


@dataclass(frozen=True)
class CodecConfig:
    n_filters: int = 256  # F
    kernel_size: int = 32  # W
    stride: int = 16  # H

    def __post_init__(self):
        if min(self.n_filters, self.kernel_size, self.stride) <= 0:
            raise ValueError(f"codec sizes must be positive: {self}")
        if self.stride > self.kernel_size:
            raise ValueError(f"stride {self.stride} exceeds kernel length {self.kernel_size}")

    def n_frames(self, n_samples: int) -> int:
        return ad.conv_frames(n_samples, self.kernel_size, self.stride)


def codec_param_count(config: CodecConfig) -> int:
    """Encoder plus decoder filterbanks, no biases."""
    return 2 * config.n_filters * config.kernel_size


class TfCodec(nn.Module):
    """One strided-conv encoder (followed by ReLU) and one transposed-conv decoder.

    Every channel of a multichannel signal goes through the same filterbank.
    """

    def __init__(self, config: CodecConfig = CodecConfig()):
        super().__init__()
        self.config = config
        bound = 1.0 / math.sqrt(config.kernel_size)
        shape = (config.n_filters, 1, config.kernel_size)
        self.encoder = nn.Parameter(torch.empty(shape).uniform_(-bound, bound))
        self.decoder = nn.Parameter(torch.empty(shape).uniform_(-bound, bound))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(..., N) -> (..., F, T), nonnegative."""
        if x.shape[-1] < self.config.kernel_size:
            raise ValueError(f"signal of {x.shape[-1]} samples is shorter than the {self.config.kernel_size}-tap encoder")
        lead = x.shape[:-1]
        z = ad.conv1d(x.reshape(-1, x.shape[-1]), self.encoder, self.config.stride)
        return ad.relu(z).reshape(*lead, *z.shape[-2:])

    def decode(self, z: torch.Tensor, length: int) -> torch.Tensor:
        """(..., F, T) -> (..., length); overlap-added, then truncated or zero padded."""
        if z.shape[-2] != self.config.n_filters:
            raise ValueError(f"decode expects {self.config.n_filters} features on axis -2, got {z.shape[-2]}")
        lead = z.shape[:-2]
        y = ad.conv1d_transpose(z.reshape(-1, *z.shape[-2:]), self.decoder, self.config.stride, length)
        return y.reshape(*lead, length)
