"""Ambisonic-to-Ambisonic speech separation by plane-wave-domain masking."""

from .config import ModelConfig, TrainConfig, DataConfig, PRESETS, resolve
from .pipelines import (
    AmbiSep,
    OmniSF,
    OracleWiener,
    PwdSF,
    build_model,
    evaluate_model,
    param_breakdown,
    param_count,
    separate,
)
from .pwd import build_pwd_matrix, pwd_decode, pwd_encode

__version__ = "0.1.0"

__all__ = [
    "AmbiSep",
    "OmniSF",
    "PwdSF",
    "OracleWiener",
    "ModelConfig",
    "TrainConfig",
    "DataConfig",
    "PRESETS",
    "resolve",
    "build_model",
    "evaluate_model",
    "param_breakdown",
    "param_count",
    "separate",
    "build_pwd_matrix",
    "pwd_encode",
    "pwd_decode",
]
