"""End-to-end separation systems.

* ``AmbiSep``: plane-wave encoding, shared TF codec, triple-path masknet,
  masked decoding, plane-wave decoding.
* ``OmniSF``: one global mask per source estimated from the omni channel
  and applied to every Ambisonic channel.
* ``PwdSF``: a single-channel masknet run on each plane-wave channel, then
  a post transformer across all J*Q outputs to sort out per-channel
  permutations.
* ``OracleWiener``: the AmbiSep chain with ratio masks from the true images.

All modules map a batch of mixtures (B, ch, N) to estimates (B, J, ch, N).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .codec import TfCodec, codec_param_count
from .config import ModelConfig
from .masknet import Masknet, PostTransformer, masknet_param_count, transformer_layer_param_count
from .pwd import build_pwd_matrix, pwd_decode, pwd_encode


@dataclass
class SeparationOutput:
    estimates: torch.Tensor | np.ndarray  # (B, J, ch, N) or (J, ch, N)
    masks: torch.Tensor | np.ndarray | None  # (B, J, Q, F, T) or (J, Q, F, T)


def oracle_wiener_masks(targets_tf: torch.Tensor, source_axis: int = 1) -> torch.Tensor:
    """Ratio of each source's squared TF magnitude to the sum over sources.

    Where the summed power is below ``sqrt(tiny)`` of the dtype the masks are
    1/J; dividing by smaller totals overflows the gradient.
    """
    power = targets_tf.pow(2)
    total = power.sum(dim=source_axis, keepdim=True)
    n = targets_tf.shape[source_axis]
    live = total > torch.finfo(total.dtype).tiny ** 0.5
    uniform = torch.full_like(power, 1.0 / n)
    return torch.where(live, power / torch.where(live, total, torch.ones_like(total)), uniform)


class _Separator(nn.Module):
    needs_targets = False

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.codec = TfCodec(config.codec())
        self.pwd = build_pwd_matrix(config.order)

    def _check(self, x):
        if x.dim() != 3 or x.shape[1] != self.config.n_channels:
            raise ValueError(f"expected mixtures shaped (B, {self.config.n_channels}, N), got {tuple(x.shape)}")

    def _to_pwd(self, x):
        return pwd_encode(x, self.pwd) if self.config.use_pwd else x

    def _from_pwd(self, y):
        return pwd_decode(y, self.pwd) if self.config.use_pwd else y


class AmbiSep(_Separator):
    def __init__(self, config: ModelConfig):
        super().__init__(config)
        self.masknet = Masknet(config.masknet())

    def forward(self, x, targets=None) -> SeparationOutput:
        self._check(x)
        e = self.codec.encode(self._to_pwd(x))  # (B, Q, F, T)
        masks = self.masknet(e)  # (B, J, Q, F, T)
        y = self.codec.decode(masks * e.unsqueeze(1), x.shape[-1])
        return SeparationOutput(self._from_pwd(y), masks)


class OmniSF(_Separator):
    def __init__(self, config: ModelConfig):
        super().__init__(config)
        self.masknet = Masknet(config.masknet())

    def forward(self, x, targets=None) -> SeparationOutput:
        self._check(x)
        e = self.codec.encode(x)  # (B, ch, F, T)
        masks = self.masknet(e[:, :1])  # (B, J, 1, F, T)
        y = self.codec.decode(masks * e.unsqueeze(1), x.shape[-1])
        return SeparationOutput(y, masks)


class PwdSF(_Separator):
    def __init__(self, config: ModelConfig, post: bool = True):
        super().__init__(config)
        self.masknet = Masknet(config.masknet())
        self.post = PostTransformer(config.n_filters, config.ff_dim, config.heads, config.dropout) if post else None

    def forward(self, x, targets=None) -> SeparationOutput:
        self._check(x)
        e = self.codec.encode(self._to_pwd(x))  # (B, Q, F, T)
        b, q, f, t = e.shape
        masks = self.masknet(e.reshape(b * q, 1, f, t))  # (B*Q, J, 1, F, T)
        masks = masks.reshape(b, q, -1, f, t).transpose(1, 2)  # (B, J, Q, F, T)
        y = self.codec.decode(masks * e.unsqueeze(1), x.shape[-1])  # (B, J, Q, N)
        if self.post is not None:
            y = self.post(y)
        return SeparationOutput(self._from_pwd(y), masks)


class OracleWiener(_Separator):
    needs_targets = True

    def forward(self, x, targets=None) -> SeparationOutput:
        self._check(x)
        if targets is None:
            raise ValueError("the oracle pipeline needs the true source images")
        e = self.codec.encode(self._to_pwd(x))
        c = self.codec.encode(self._to_pwd(targets))  # (B, J, Q, F, T)
        masks = oracle_wiener_masks(c)
        y = self.codec.decode(masks * e.unsqueeze(1), x.shape[-1])
        return SeparationOutput(self._from_pwd(y), masks)


_MODELS = {"ambisep": AmbiSep, "omni-sf": OmniSF, "pwd-sf": PwdSF, "oracle": OracleWiener}


def build_model(config: ModelConfig) -> _Separator:
    return _MODELS[config.kind](config)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def param_breakdown(config: ModelConfig) -> dict[str, int]:
    """Closed-form parameter counts per submodule."""
    out = {"codec": codec_param_count(config.codec())}
    if config.kind != "oracle":
        out["masknet"] = masknet_param_count(config.masknet())
    if config.kind == "pwd-sf":
        out["post_transformer"] = transformer_layer_param_count(config.n_filters, config.ff_dim)
    out["total"] = sum(out.values())
    return out


def _run(model, mixture, targets=None):
    single = np.ndim(mixture) == 2
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(mixture), dtype=dtype)
    t = None if targets is None else torch.as_tensor(np.asarray(targets), dtype=dtype)
    if single:
        x = x[None]
        t = None if t is None else t[None]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(x, t)
    model.train(was_training)
    est = out.estimates.double().numpy()
    masks = None if out.masks is None else out.masks.double().numpy()
    if single:
        est = est[0]
        masks = None if masks is None else masks[0]
    return SeparationOutput(est, masks)


def ambisep_separate(mixture, model: AmbiSep) -> SeparationOutput:
    """Separate one (ch, N) or a batch (B, ch, N) of Ambisonic mixtures."""
    return _run(model, mixture)


def omni_sf_separate(mixture, model: OmniSF) -> SeparationOutput:
    return _run(model, mixture)


def pwd_sf_separate(mixture, model: PwdSF) -> SeparationOutput:
    return _run(model, mixture)


def oracle_separate(mixture, targets, model: OracleWiener) -> SeparationOutput:
    return _run(model, mixture, targets)


def separate(mixture, model: _Separator, targets=None) -> SeparationOutput:
    return _run(model, mixture, targets if model.needs_targets else None)


def evaluate_model(model: _Separator, examples, taps: int = 32) -> list[dict]:
    """Metric records (see ``metrics.evaluate_example``) for each mixture example."""
    from .metrics import evaluate_example

    records = []
    for ex in examples:
        out = separate(ex.mixture, model, ex.targets)
        records.append(evaluate_example(ex.mixture, out.estimates, ex.targets, taps))
    return records
