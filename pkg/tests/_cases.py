"""Shared test fixtures that are plain functions (importable from any test module)."""

import numpy as np
import torch

from ambisep import autodiff as ad
from ambisep.masknet import Masknet, MasknetConfig


def _away_from_zero(t, margin=0.1):
    return torch.where(t.abs() < margin, t.sign() * margin + t, t)


def op_cases(seed=0):
    """One (kind, inputs, params, attrs) case per autodiff op, float64, all tensors trainable."""
    g = torch.Generator().manual_seed(seed)

    def r(*shape, kink=False):
        t = torch.randn(*shape, generator=g, dtype=torch.float64)
        return _away_from_zero(t) if kink else t

    d, heads = 8, 2
    attn_params = [r(d, d) * 0.3, r(d), r(d, d) * 0.3, r(d), r(d, d) * 0.3, r(d), r(d, d) * 0.3, r(d)]
    return [
        ("matmul", [r(2, 3, 4), r(4, 5)], [], {}),
        ("conv1d", [r(2, 40)], [r(6, 1, 8)], {"stride": 4}),
        ("conv1d_transpose", [r(2, 6, 9)], [r(6, 1, 8)], {"stride": 4, "length": 40}),
        ("linear", [r(3, 5)], [r(4, 5), r(4)], {}),
        ("layer_norm", [r(3, 6)], [r(6), r(6)], {}),
        ("softmax", [r(3, 7)], [], {"dim": -1}),
        ("multihead_attention", [r(2, 5, d)], attn_params, {"num_heads": heads}),
        ("relu", [r(4, 5, kink=True)], [], {}),
        ("prelu", [r(4, 5, kink=True)], [torch.tensor([0.25], dtype=torch.float64)], {}),
        ("tanh", [r(4, 5)], [], {}),
        ("sigmoid", [r(4, 5)], [], {}),
        ("add", [r(3, 4), r(4)], [], {}),
        ("mul", [r(3, 4), r(3, 1)], [], {}),
        ("reshape", [r(3, 4)], [], {"shape": (2, 6)}),
        ("permute", [r(2, 3, 4)], [], {"dims": (2, 0, 1)}),
    ]


def op_grad_report(kind, inputs, params, attrs, tolerance=1e-3, step=1e-6, seed=0):
    tensors = [t.clone().requires_grad_(True) for t in inputs + params]
    n_in = len(inputs)
    out_shape = ad.forward_op(kind, tensors[:n_in], tensors[n_in:], **attrs).shape
    weights = torch.randn(out_shape, generator=torch.Generator().manual_seed(seed + 1), dtype=torch.float64)

    def loss():
        return (ad.forward_op(kind, tensors[:n_in], tensors[n_in:], **attrs) * weights).sum()

    names = {f"input{i}" if i < n_in else f"param{i - n_in}": t for i, t in enumerate(tensors)}
    return ad.grad_check(loss, names, step=step, tolerance=tolerance)


def toy_masknet_report(tolerance=1e-3, step=1e-6, max_elements=None, seed=0):
    """Finite-difference check of the whole masknet at F=8, C=6, R=1, N_L=1, 2 heads."""
    torch.manual_seed(seed)
    config = MasknetConfig(n_features=8, chunk_size=6, repeats=1, layers=1, ff_dim=16, heads=2, n_sources=2,
                           n_channels=4)
    net = Masknet(config).double()
    g = torch.Generator().manual_seed(seed + 1)
    e = torch.rand(1, 4, 8, 14, generator=g, dtype=torch.float64)
    weights = torch.randn(1, 2, 4, 8, 14, generator=g, dtype=torch.float64)
    params = ad.ParamRegistry.from_module(net, trainable_only=True)
    return ad.grad_check(lambda: (net(e) * weights).sum(), params, step=step, tolerance=tolerance,
                         max_elements=max_elements)


def random_tf(shape, seed=0):
    return np.random.default_rng(seed).uniform(0.01, 2.0, size=shape)


# -- toy training runs shared by the learning criteria -------------------------

TOY_STEPS = 2000


def toy_train_config(seed=0, steps=TOY_STEPS):
    from ambisep.config import TrainConfig

    # 25 steps per epoch at batch 2; plateau halving on the training loss from epoch 40
    return TrainConfig(lr=1e-3, epochs=10_000, batch_size=2, crop_seconds=0.5, max_steps=steps,
                       lr_decay_start_epoch=40, seed=seed)


def toy_run(kind="ambisep", seed=0, steps=TOY_STEPS, corpus=None):
    """Train a toy pipeline on the 50/10 toy corpus; returns (model, TrainResult, held-out examples)."""
    from ambisep.config import PRESETS, resolve
    from ambisep.data import toy_corpus
    from ambisep.pipelines import build_model
    from ambisep.trainer import configure_determinism, train

    train_data, test = corpus if corpus is not None else toy_corpus()
    model_config, _, _ = resolve(PRESETS["toy"], {"model.kind": kind})
    configure_determinism(seed)
    model = build_model(model_config)
    result = train(model, train_data, None, toy_train_config(seed, steps))
    return model, result, test.examples
