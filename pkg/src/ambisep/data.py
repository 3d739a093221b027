"""Mixture sources for training and evaluation.

``DynamicMixer`` keeps a fixed list of dry source pairs and draws a fresh
room / RIR association for every epoch. ``StaticMixtures`` replays fixed
examples (e.g. loaded from a manifest).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audio
from .simulator import (
    AmbisonicRir,
    MixtureExample,
    epoch_remix,
    make_mixture,
    sample_room_and_sources,
    simulate_rir,
    synthetic_utterance,
)


@dataclass
class SourcePair:
    signals: tuple[np.ndarray, ...]
    ids: tuple[str, ...]


class DynamicMixer:
    def __init__(self, pairs: list[SourcePair], rirs: dict[int, list[AmbisonicRir]], pairing_seed: int = 0,
                 max_seconds: float = 5.0):
        self.pairs = pairs
        self.rirs = rirs
        self.pairing_seed = pairing_seed
        self.max_seconds = max_seconds

    def __len__(self):
        return len(self.pairs)

    def epoch(self, epoch_index: int) -> list[MixtureExample]:
        pools = {room: list(range(len(rs))) for room, rs in self.rirs.items()}
        n_src = len(self.pairs[0].signals) if self.pairs else 2
        assoc = epoch_remix(self.pairing_seed, epoch_index, pools, len(self.pairs), n_src)
        out = []
        for i, (pair, (room, picks)) in enumerate(zip(self.pairs, assoc)):
            rirs = [self.rirs[room][k] for k in picks]
            out.append(make_mixture(pair.signals, rirs, self.max_seconds, source_ids=pair.ids, room_id=room,
                                    seed=self.pairing_seed * 1_000_003 + epoch_index * 1009 + i))
        return out


class StaticMixtures:
    def __init__(self, examples: list[MixtureExample]):
        self.examples = examples

    def __len__(self):
        return len(self.examples)

    def epoch(self, epoch_index: int) -> list[MixtureExample]:
        return self.examples


def simulate_rooms(n_rooms, rirs_per_room, order=1, sample_rate=16000, t60_range=(0.2, 0.5), seed=0):
    """RIRs for ``n_rooms`` random rooms: {room_id: [AmbisonicRir, ...]}."""
    out = {}
    for room_id in range(n_rooms):
        room, sources = sample_room_and_sources([seed, room_id], rirs_per_room, t60_range, sample_rate)
        out[room_id] = [simulate_rir(room, s, order, room_id) for s in sources]
    return out


def synthetic_pairs(n_pairs, n_speakers, n_samples, sample_rate, seed, level_db=2.5):
    """Random two-speaker pairs of synthetic utterances with a random level offset."""
    rng = np.random.default_rng([seed, 17])
    pairs = []
    for i in range(n_pairs):
        a, b = rng.choice(n_speakers, size=2, replace=False)
        ua, ub = int(rng.integers(1 << 30)), int(rng.integers(1 << 30))
        gain = 10 ** (rng.uniform(-level_db, level_db) / 20)
        sig_a = synthetic_utterance(int(a), ua, n_samples, sample_rate)
        sig_b = gain * synthetic_utterance(int(b), ub, n_samples, sample_rate)
        pairs.append(SourcePair((sig_a, sig_b), (f"spk{a}_{ua}", f"spk{b}_{ub}")))
    return pairs


def split_rooms(rirs: dict[int, list[AmbisonicRir]], held_out_per_room: int):
    """Split each room's RIRs into (training, held-out) pools."""
    train = {r: rs[:-held_out_per_room] if held_out_per_room else rs for r, rs in rirs.items()}
    test = {r: rs[-held_out_per_room:] for r, rs in rirs.items()} if held_out_per_room else {}
    return train, test


def toy_corpus(n_train=50, n_test=10, n_rooms=2, rirs_per_room=12, held_out_per_room=4, t60=0.2,
               sample_rate=8000, seconds=1.0, n_speakers=8, order=1, seed=0):
    """Training mixer and fixed held-out mixtures sharing rooms but not source positions or utterances."""
    rirs = simulate_rooms(n_rooms, rirs_per_room, order, sample_rate, (t60, t60), seed)
    train_rirs, test_rirs = split_rooms(rirs, held_out_per_room)
    n = int(round(seconds * sample_rate))
    train = DynamicMixer(synthetic_pairs(n_train, n_speakers, n, sample_rate, [seed, 1]), train_rirs, seed, seconds)
    test = DynamicMixer(synthetic_pairs(n_test, n_speakers, n, sample_rate, [seed, 2]), test_rirs, seed + 7919, seconds)
    return train, StaticMixtures(test.epoch(0))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def write_manifest(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    path = Path(path)
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_mixtures(manifest_path) -> StaticMixtures:
    """Mixtures listed in a manifest; paths are relative to the manifest's directory."""
    root = Path(manifest_path).parent
    examples = []
    for rec in read_manifest(manifest_path):
        mix, fs = audio.read_wav(root / rec["mixture_path"])
        targets = np.stack([audio.read_wav(root / p)[0] for p in rec["target_paths"]])
        examples.append(MixtureExample(mix, targets, fs, room_id=rec.get("room_id", -1), seed=rec.get("seed", -1)))
    return StaticMixtures(examples)
