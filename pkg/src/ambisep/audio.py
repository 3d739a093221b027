"""32-bit float WAV I/O for multichannel (channels, samples) arrays."""

from pathlib import Path

import numpy as np
from scipy.io import wavfile


def write_wav(path, data, sample_rate: int):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 1:
        data = data[None]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), int(sample_rate), np.ascontiguousarray(data.T))


def read_wav(path) -> tuple[np.ndarray, int]:
    """Returns (data of shape (channels, samples) as float64, sample_rate)."""
    fs, data = wavfile.read(str(path))
    if data.dtype != np.float32:
        raise ValueError(f"{path}: expected 32-bit float WAV, got {data.dtype}")
    data = data.astype(np.float64)
    return (data[None] if data.ndim == 1 else data.T), fs
