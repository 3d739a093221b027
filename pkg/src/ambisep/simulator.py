"""Shoebox image-source simulation of Ambisonic room impulse responses.

Every image source is encoded as a far-field plane wave from its direction
as seen from the array, with gain ``beta**reflections / distance`` and a
fractional delay realised by a 16-tap windowed sinc. Walls share one
frequency-independent reflection coefficient derived from T60 with
Eyring's formula.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import fftconvolve, lfilter

from .pwd import n_channels, sh_matrix

SINC_TAPS = 16


@dataclass(frozen=True)
class RoomSpec:
    dims: tuple[float, float, float]
    t60: float
    array_pos: tuple[float, float, float]
    sample_rate: int = 16000
    speed_of_sound: float = 343.0
    max_image_order: int | None = None  # None: enough to fill the RIR length

    @property
    def rir_length(self) -> int:
        return int(round(self.t60 / 2 * self.sample_rate))

    def reflection_coefficient(self) -> float:
        """Pressure reflection coefficient from Eyring's reverberation formula."""
        if self.t60 <= 0:
            raise ValueError(f"t60 must be positive, got {self.t60}")
        lx, ly, lz = self.dims
        volume = lx * ly * lz
        surface = 2 * (lx * ly + lx * lz + ly * lz)
        # T60 = 24 ln(10) V / (-c S ln(1 - a)),  beta = sqrt(1 - a)
        log_energy = -24 * math.log(10) * volume / (self.speed_of_sound * surface * self.t60)
        beta = math.exp(log_energy / 2)
        if not 0 < beta < 1:
            raise ValueError(f"t60={self.t60} s gives reflection coefficient {beta}; need 0 < beta < 1")
        return beta

    def image_order(self) -> int:
        if self.max_image_order is not None:
            return self.max_image_order
        reach = self.speed_of_sound * self.rir_length / self.sample_rate
        return int(math.ceil(reach / min(self.dims))) + 1


@dataclass
class AmbisonicRir:
    data: np.ndarray  # ((L+1)^2, n)
    sample_rate: int
    room_id: int = -1
    source_pos: tuple[float, float, float] | None = None

    @property
    def order(self) -> int:
        return int(round(math.sqrt(self.data.shape[0]))) - 1


@dataclass
class MixtureExample:
    mixture: np.ndarray  # (ch, N)
    targets: np.ndarray  # (J, ch, N)
    sample_rate: int
    gains: np.ndarray = field(default_factory=lambda: np.ones(0))
    source_ids: tuple = ()
    room_id: int = -1
    seed: int = -1


def _inside(point, dims, margin=0.0):
    return all(margin <= p <= d - margin for p, d in zip(point, dims))


def fractional_delay_kernel(delay: np.ndarray):
    """Hann-windowed sinc taps for each (possibly fractional) delay.

    Returns (first_sample, taps) with taps of shape (len(delay), SINC_TAPS),
    each row normalised to unit sum so an image's total gain is exact.
    """
    delay = np.asarray(delay, dtype=float)
    half = SINC_TAPS // 2
    first = np.floor(delay).astype(int) - half + 1
    n = first[:, None] + np.arange(SINC_TAPS)[None, :]
    t = n - delay[:, None]
    window = 0.5 * (1 + np.cos(np.pi * t / half))
    window[np.abs(t) >= half] = 0.0
    taps = np.sinc(t) * window
    return first, taps / taps.sum(axis=1, keepdims=True)


def image_sources(room: RoomSpec, src):
    """Positions and reflection counts of all images up to the room's image order."""
    order = room.image_order()
    r = np.arange(-order, order + 1)
    nx, ny, nz, ux, uy, uz = np.meshgrid(r, r, r, (0, 1), (0, 1), (0, 1), indexing="ij")
    n = np.stack([nx, ny, nz], -1).reshape(-1, 3)
    u = np.stack([ux, uy, uz], -1).reshape(-1, 3)
    reflections = (np.abs(n - u) + np.abs(n)).sum(axis=1)
    keep = reflections <= order
    n, u, reflections = n[keep], u[keep], reflections[keep]
    dims = np.asarray(room.dims, dtype=float)
    pos = (1 - 2 * u) * np.asarray(src, dtype=float) + 2 * n * dims
    return pos, reflections


def simulate_rir(room: RoomSpec, src, order: int = 1, room_id: int = -1, length: int | None = None) -> AmbisonicRir:
    """Ambisonic RIR of a point source at ``src`` recorded at ``room.array_pos``.

    Channels are ACN/SN3D; the length is ``round(t60 / 2 * fs)`` samples
    unless ``length`` overrides it (the image order is then raised to fill
    the longer response).
    """
    src = tuple(float(v) for v in src)
    if not _inside(room.array_pos, room.dims) or not _inside(src, room.dims):
        raise ValueError(f"source {src} and array {room.array_pos} must lie inside room {room.dims}")
    beta = room.reflection_coefficient()
    if length is not None and room.max_image_order is None:
        reach = room.speed_of_sound * length / room.sample_rate
        room = replace(room, max_image_order=int(math.ceil(reach / min(room.dims))) + 1)
    length = room.rir_length if length is None else int(length)
    if length < 1:
        raise ValueError(f"t60={room.t60} s gives an empty RIR")

    pos, reflections = image_sources(room, src)
    rel = pos - np.asarray(room.array_pos, dtype=float)
    dist = np.linalg.norm(rel, axis=1)
    if np.any(dist == 0):
        raise ValueError("source coincides with the array position")
    delay = dist / room.speed_of_sound * room.sample_rate
    keep = delay < length + SINC_TAPS // 2
    rel, dist, delay, reflections = rel[keep], dist[keep], delay[keep], reflections[keep]

    gain = beta ** reflections / dist
    azimuth = np.arctan2(rel[:, 1], rel[:, 0])
    elevation = np.arcsin(np.clip(rel[:, 2] / dist, -1.0, 1.0))
    encoding = sh_matrix(order, azimuth, elevation) * gain[:, None]  # (images, ch)

    first, taps = fractional_delay_kernel(delay)
    idx = first[:, None] + np.arange(SINC_TAPS)[None, :]
    valid = (idx >= 0) & (idx < length)
    rir = np.zeros((n_channels(order), length))
    img, tap = np.nonzero(valid)
    for ch in range(rir.shape[0]):
        np.add.at(rir[ch], idx[img, tap], encoding[img, ch] * taps[img, tap])
    return AmbisonicRir(rir, room.sample_rate, room_id, src)


def sample_room_and_sources(
    seed,
    n_sources: int = 46,
    t60_range=(0.2, 0.5),
    sample_rate: int = 16000,
    xy_range=(5.0, 10.0),
    z_range=(3.0, 4.0),
    array_wall_distance: float = 1.0,
    source_distance=(0.5, 1.5),
    source_wall_distance: float = 0.5,
) -> tuple[RoomSpec, list[tuple[float, float, float]]]:
    """Random shoebox room, array position and source positions around the array."""
    rng = np.random.default_rng(seed)
    dims = (rng.uniform(*xy_range), rng.uniform(*xy_range), rng.uniform(*z_range))
    array = tuple(rng.uniform(array_wall_distance, d - array_wall_distance) for d in dims)
    t60 = float(rng.uniform(*t60_range))
    room = RoomSpec(tuple(float(d) for d in dims), t60, tuple(float(a) for a in array), sample_rate)
    sources = []
    while len(sources) < n_sources:
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        pos = np.asarray(array) + rng.uniform(*source_distance) * direction
        if _inside(pos, dims, source_wall_distance):
            sources.append(tuple(float(p) for p in pos))
    return room, sources


def energy_decay_curve(rir) -> np.ndarray:
    """Schroeder backward-integrated energy of a 1-D response in dB, 0 dB at the start."""
    energy = np.cumsum(np.asarray(rir, dtype=float)[::-1] ** 2)[::-1]
    with np.errstate(divide="ignore"):
        return 10 * np.log10(energy / energy[0])


def signal_power(x) -> float:
    return float(np.mean(np.asarray(x, dtype=float) ** 2))


def make_mixture(speech, rirs, max_seconds: float = 5.0, **meta) -> MixtureExample:
    """Reverberant images of each source and their sum.

    Image j is ``gain_j * (speech_j * rir_j)``, with gains chosen so that the
    omni-channel power ratios of the images equal the power ratios of the dry
    signals (gain of the first source is 1). Everything is trimmed to the
    shortest convolved length, capped at ``max_seconds``.
    """
    if len(speech) < 2 or len(speech) != len(rirs):
        raise ValueError(f"need J >= 2 speech signals and as many RIRs, got {len(speech)} and {len(rirs)}")
    fs = rirs[0].sample_rate
    if any(r.sample_rate != fs for r in rirs):
        raise ValueError("RIR sample rates differ")
    speech = [np.asarray(s, dtype=float) for s in speech]
    powers = np.array([signal_power(s) for s in speech])
    if np.any(powers == 0):
        raise ValueError(f"silent source among inputs (powers {powers})")
    images = [fftconvolve(s[None, :], r.data, axes=-1) for s, r in zip(speech, rirs)]
    n = min(min(im.shape[-1] for im in images), int(round(max_seconds * fs)))
    images = np.stack([im[:, :n] for im in images])
    omni = np.array([signal_power(im[0]) for im in images])
    if np.any(omni == 0):
        raise ValueError("a reverberant image has a silent omni channel")
    gains = np.sqrt(powers / powers[0] * omni[0] / omni)
    gains[0] = 1.0
    targets = images * gains[:, None, None]
    return MixtureExample(targets.sum(axis=0), targets, fs, gains, **meta)


def epoch_remix(pairing_seed: int, epoch_index: int, rooms: dict, n_mixtures: int, n_sources: int = 2):
    """Room and RIR choice for every mixture of one epoch.

    ``rooms`` maps room id to the list of its RIR ids. Returns
    ``[(room_id, (rir_id, ...)), ...]``; all RIRs of a mixture come from the
    same room and are distinct.
    """
    rng = np.random.default_rng([pairing_seed, epoch_index])
    room_ids = sorted(r for r, pool in rooms.items() if len(pool) >= n_sources)
    if not room_ids:
        raise ValueError(f"no room has {n_sources} RIRs")
    out = []
    for _ in range(n_mixtures):
        room = room_ids[rng.integers(len(room_ids))]
        picks = rng.choice(len(rooms[room]), size=n_sources, replace=False)
        out.append((room, tuple(rooms[room][i] for i in picks)))
    return out


# ---------------------------------------------------------------------------
# synthetic speakers
# ---------------------------------------------------------------------------

def _speaker_profile(speaker: int, sample_rate: int):
    rng = np.random.default_rng([7919, speaker])
    nyq = sample_rate / 2
    formants = np.array([rng.uniform(250, 900), rng.uniform(900, 2200), rng.uniform(2200, 3400)])
    formants = np.minimum(formants, 0.9 * nyq)
    bandwidths = rng.uniform(60, 180, size=3)
    tilt = rng.uniform(0.5, 0.95)
    return formants, bandwidths, tilt


def _resonator(freq, bw, fs):
    r = math.exp(-math.pi * bw / fs)
    theta = 2 * math.pi * freq / fs
    return [1 - r], [1, -2 * r * math.cos(theta), r * r]


def synthetic_utterance(speaker: int, seed: int, n_samples: int, sample_rate: int = 16000) -> np.ndarray:
    """Noise bursts shaped by a speaker-specific formant envelope, unit RMS.

    Bursts last 80-300 ms with 30-200 ms pauses; each burst perturbs the
    speaker's formants by up to 10% so utterances are not stationary.
    """
    rng = np.random.default_rng([speaker, seed])
    formants, bandwidths, tilt = _speaker_profile(speaker, sample_rate)
    out = np.zeros(n_samples)
    pos = int(rng.uniform(0, 0.1) * sample_rate)
    while pos < n_samples:
        dur = int(rng.uniform(0.08, 0.3) * sample_rate)
        burst = rng.standard_normal(dur)
        burst = lfilter([1.0], [1.0, -tilt], burst)
        shaped = np.zeros(dur)
        for f, bw in zip(formants * rng.uniform(0.9, 1.1, size=3), bandwidths):
            b, a = _resonator(f, bw, sample_rate)
            shaped += lfilter(b, a, burst)
        shaped *= np.hanning(dur)
        end = min(pos + dur, n_samples)
        out[pos:end] += shaped[: end - pos]
        pos = end + int(rng.uniform(0.03, 0.2) * sample_rate)
    rms = np.sqrt(np.mean(out**2))
    if rms == 0:
        out[0] = 1.0
        rms = np.sqrt(np.mean(out**2))
    return out / rms
