"""Command-line entry point: ``ambisep {simulate,train,separate,evaluate,param-count}``.

Settings come from a preset name or a TOML/JSON file with flat dotted keys
(``model.n_filters = 64``), then ``--set key=value`` overrides, then the
dedicated flags. Every command writes or prints the resolved config with its
seed. Exit codes: 0 success, 1 runtime failure, 2 usage error.

``AMBISEP_NUM_THREADS`` overrides the torch thread count.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import audio
from .config import MODEL_KINDS, load_flat, resolve, to_flat
from .data import load_mixtures, read_manifest, simulate_rooms, synthetic_pairs, write_manifest
from .metrics import evaluate_example, summarize
from .pipelines import build_model, param_breakdown, param_count, separate
from .simulator import epoch_remix, make_mixture

log = logging.getLogger("ambisep")

THREADS_ENV = "AMBISEP_NUM_THREADS"


def _setup(seed=None):
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    threads = os.environ.get(THREADS_ENV)
    if threads:
        try:
            torch.set_num_threads(int(threads))
        except ValueError:
            raise click.UsageError(f"{THREADS_ENV} must be an integer, got {threads!r}")
    if seed is not None:
        torch.manual_seed(seed)


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep:
            raise click.BadParameter(f"expected key=value, got {item!r}", param_hint="--set")
        out[key.strip()] = value.strip()
    return out


def _configs(config, sets, extra=None):
    try:
        flat = load_flat(config)
        return resolve(flat, {**_overrides(sets), **(extra or {})})
    except (KeyError, ValueError, FileNotFoundError) as exc:
        raise click.UsageError(str(exc))


def _dump(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


config_option = click.option("--config", default=None, help="Preset name (full, toy) or TOML/JSON file.")
set_option = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Override a dotted config key.")
seed_option = click.option("--seed", type=int, default=None, help="Master seed (default: from the config).")


@click.group()
@click.version_option(package_name="artifact")
def cli():
    """Ambisonic speech separation toolkit."""


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _speech_pairs(speech_dir, n_pairs, n_samples, sample_rate, seed):
    files = sorted(Path(speech_dir).glob("*.wav"))
    if len(files) < 2:
        raise click.UsageError(f"--speech-dir {speech_dir} needs at least two WAV files")
    rng = np.random.default_rng([seed, 23])
    pairs = []
    for _ in range(n_pairs):
        picks = rng.choice(len(files), size=2, replace=False)
        sigs = []
        for k in picks:
            data, fs = audio.read_wav(files[k])
            if fs != sample_rate:
                raise click.UsageError(f"{files[k]} has sample rate {fs}, expected {sample_rate}")
            x = data[0, :n_samples]
            sigs.append(np.pad(x, (0, n_samples - x.shape[-1])))
        pairs.append((tuple(sigs), tuple(files[k].stem for k in picks)))
    return pairs


def _write_mixtures(out, name, pairs, rirs, seed, seconds):
    pools = {room: list(range(len(rs))) for room, rs in rirs.items()}
    assoc = epoch_remix(seed, 0, pools, len(pairs), 2)
    records = []
    for i, ((signals, ids), (room, picks)) in enumerate(zip(pairs, assoc)):
        ex = make_mixture(signals, [rirs[room][k] for k in picks], seconds)
        folder = Path(name) / f"{i:05d}"
        audio.write_wav(out / folder / "mixture.wav", ex.mixture, ex.sample_rate)
        targets = []
        for j, t in enumerate(ex.targets):
            audio.write_wav(out / folder / f"target{j}.wav", t, ex.sample_rate)
            targets.append(str(folder / f"target{j}.wav"))
        records.append({"mixture_path": str(folder / "mixture.wav"), "target_paths": targets, "room_id": int(room),
                        "seed": int(seed), "rir_ids": [int(k) for k in picks], "source_ids": list(ids)})
    write_manifest(out / f"{name}.jsonl", records)
    return records


@cli.command()
@config_option
@set_option
@click.option("--rooms", type=int, default=None, help="Number of rooms.")
@click.option("--rirs-per-room", type=int, default=None, help="Source positions (RIRs) per room.")
@click.option("--t60-range", type=float, nargs=2, default=None, help="Min and max T60 in seconds.")
@click.option("--order", type=int, default=None, help="Ambisonic order.")
@click.option("--sample-rate", type=int, default=None)
@click.option("--mixtures", type=int, default=0, show_default=True, help="Two-source mixtures to render.")
@click.option("--valid-mixtures", type=int, default=0, show_default=True, help="Extra mixtures for validation.")
@click.option("--seconds", type=float, default=None, help="Mixture length in seconds.")
@click.option("--speech-dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Directory of mono float32 WAVs; default is synthetic speech.")
@seed_option
@click.option("--out", type=click.Path(file_okay=False), required=True)
def simulate(config, sets, rooms, rirs_per_room, t60_range, order, sample_rate, mixtures, valid_mixtures, seconds,
             speech_dir, seed, out):
    """Simulate AmbiX RIRs per room, optionally with rendered mixtures."""
    extra = {k: v for k, v in {
        "data.rooms": rooms, "data.rirs_per_room": rirs_per_room, "data.order": order,
        "data.sample_rate": sample_rate, "data.seconds": seconds, "data.seed": seed,
        "data.t60_min": t60_range[0] if t60_range else None, "data.t60_max": t60_range[1] if t60_range else None,
    }.items() if v is not None}
    _, _, dc = _configs(config, sets, extra)
    if dc.rooms < 1 or dc.rirs_per_room < 1:
        raise click.UsageError("--rooms and --rirs-per-room must be positive")
    if not 0 < dc.t60_min <= dc.t60_max:
        raise click.UsageError(f"invalid --t60-range {dc.t60_min} {dc.t60_max}: need 0 < min <= max")
    if dc.order < 0 or dc.sample_rate <= 0 or dc.seconds <= 0:
        raise click.UsageError("order must be >= 0; sample rate and seconds must be positive")
    if mixtures < 0 or valid_mixtures < 0:
        raise click.UsageError("mixture counts must be non-negative")
    if (mixtures or valid_mixtures) and dc.rirs_per_room < 2:
        raise click.UsageError("rendering mixtures needs at least two RIRs per room")
    _setup(dc.seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    rirs = simulate_rooms(dc.rooms, dc.rirs_per_room, dc.order, dc.sample_rate, (dc.t60_min, dc.t60_max), dc.seed)
    records = []
    for room, rs in rirs.items():
        for k, rir in enumerate(rs):
            rel = f"rirs/room{room:03d}/rir{k:03d}.wav"
            audio.write_wav(out / rel, rir.data, rir.sample_rate)
            records.append({"path": rel, "room_id": room, "rir_id": k, "order": rir.order,
                            "sample_rate": rir.sample_rate, "source_pos": [float(v) for v in rir.source_pos]})
    write_manifest(out / "rirs.jsonl", records)
    log.info("wrote %d RIRs to %s", len(records), out)

    n_samples = int(round(dc.seconds * dc.sample_rate))
    for name, count, offset in (("mixtures", mixtures, 1), ("valid", valid_mixtures, 2)):
        if not count:
            continue
        if speech_dir:
            pairs = _speech_pairs(speech_dir, count, n_samples, dc.sample_rate, [dc.seed, offset])
        else:
            pairs = [(p.signals, p.ids) for p in
                     synthetic_pairs(count, dc.speakers, n_samples, dc.sample_rate, [dc.seed, offset])]
        _write_mixtures(out, name, pairs, rirs, dc.seed * 31 + offset, dc.seconds)
        log.info("wrote %d mixtures to %s", count, out / f"{name}.jsonl")
    _dump(out / "config.json", {"seed": dc.seed, "config": to_flat(dc)})


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--model", "kind", type=click.Choice(MODEL_KINDS), required=True)
@config_option
@set_option
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True, help="Training mixture manifest.")
@click.option("--valid", type=click.Path(exists=True, dir_okay=False), default=None, help="Validation manifest.")
@click.option("--epochs", type=int, default=None)
@click.option("--max-steps", type=int, default=None)
@seed_option
@click.option("--out", type=click.Path(file_okay=False), required=True)
def train(kind, config, sets, data, valid, epochs, max_steps, seed, out):
    """Train a pipeline; writes best.ckpt, last.ckpt, history.jsonl and config.json."""
    from .trainer import configure_determinism, train as run_training

    extra = {k: v for k, v in {"model.kind": kind, "train.epochs": epochs, "train.max_steps": max_steps,
                                "train.seed": seed}.items() if v is not None}
    mc, tc, _ = _configs(config, sets, extra)
    _setup()
    configure_determinism(tc.seed)
    train_data = load_mixtures(data)
    valid_data = load_mixtures(valid) if valid else None
    rates = {ex.sample_rate for ex in train_data.examples}
    if rates != {mc.sample_rate}:
        raise click.UsageError(f"data sample rate {sorted(rates)} does not match model.sample_rate {mc.sample_rate}")
    model = build_model(mc)
    out = Path(out)
    _dump(out / "config.json", {"seed": tc.seed, "config": to_flat(mc, tc), "data": str(data),
                                "valid": str(valid) if valid else None})
    log.info("training %s with %d parameters on %d mixtures", kind, param_count(model), len(train_data))
    result = run_training(model, train_data, valid_data, tc, out,
                          progress=lambda r: click.echo(json.dumps(r)))
    click.echo(f"best epoch {result.best_epoch} val loss {result.best_val_loss:.4f}; checkpoints in {out}")


# ---------------------------------------------------------------------------
# separate / evaluate
# ---------------------------------------------------------------------------

@cli.command("separate")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--in", "input_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--references", type=click.Path(exists=True, dir_okay=False), multiple=True,
              help="True source images; only used by the oracle pipeline.")
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@seed_option
def separate_cmd(checkpoint, input_path, references, out_dir, seed):
    """Separate one AmbiX mixture WAV into one AmbiX WAV per source."""
    from .trainer import load_model

    _setup(seed)
    model, _ = load_model(checkpoint)
    mixture, fs = audio.read_wav(input_path)
    if mixture.shape[0] != model.config.n_channels:
        raise click.UsageError(f"{input_path} has {mixture.shape[0]} channels; the model expects "
                               f"{model.config.n_channels}")
    if fs != model.config.sample_rate:
        log.warning("input sample rate %d differs from the model's %d", fs, model.config.sample_rate)
    targets = None
    if model.needs_targets:
        if len(references) != model.config.n_sources:
            raise click.UsageError(f"the oracle pipeline needs {model.config.n_sources} --references files")
        targets = np.stack([audio.read_wav(p)[0] for p in references])
    out = separate(mixture, model, targets)
    out_dir = Path(out_dir)
    for j, est in enumerate(out.estimates):
        audio.write_wav(out_dir / f"estimate{j}.wav", est, fs)
    click.echo(f"wrote {len(out.estimates)} estimates to {out_dir}")


def _read_set(paths):
    signals, rates = zip(*(audio.read_wav(p) for p in paths))
    return np.stack(signals), rates


@cli.command()
@click.option("--estimates", type=click.Path(exists=True, dir_okay=False), multiple=True,
              help="Estimate WAVs of one example, one per source.")
@click.option("--references", type=click.Path(exists=True, dir_okay=False), multiple=True,
              help="Reference image WAVs, same count as --estimates.")
@click.option("--mixture", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Evaluate this model on every mixture of --data instead.")
@click.option("--data", type=click.Path(exists=True, dir_okay=False), default=None, help="Mixture manifest.")
@click.option("--taps", type=int, default=32, show_default=True, help="SI-ISR projection filter length.")
@click.option("--report", type=click.Path(dir_okay=False), required=True, help="Output JSON report.")
@seed_option
def evaluate(estimates, references, mixture, checkpoint, data, taps, report, seed):
    """SI-SDR, SI-SDRi and SI-ISR per example plus mean and std."""
    from .trainer import load_model

    _setup(seed)
    if checkpoint or data:
        if not (checkpoint and data) or estimates or references or mixture:
            raise click.UsageError("use either --checkpoint with --data, or --estimates/--references/--mixture")
        model, _ = load_model(checkpoint)
        records = []
        for rec, ex in zip(read_manifest(data), load_mixtures(data).examples):
            est = separate(ex.mixture, model, ex.targets).estimates
            records.append({"mixture_path": rec["mixture_path"], **evaluate_example(ex.mixture, est, ex.targets, taps)})
    else:
        if not estimates or not mixture or len(estimates) != len(references):
            raise click.UsageError("need --mixture and equally many --estimates and --references")
        est, _ = _read_set(estimates)
        ref, _ = _read_set(references)
        mix, _ = audio.read_wav(mixture)
        if est.shape != ref.shape or mix.shape != ref.shape[1:]:
            raise click.UsageError(f"shape mismatch: estimates {est.shape}, references {ref.shape}, mixture {mix.shape}")
        records = [{"mixture_path": str(mixture), **evaluate_example(mix, est, ref, taps)}]
    summary = summarize(records)
    _dump(report, {"examples": records, "summary": summary})
    for key in ("si_sdr", "si_sdri", "si_isr"):
        click.echo(f"{key:8s} {summary[key]['mean']:8.2f} +- {summary[key]['std']:.2f} dB")


# ---------------------------------------------------------------------------
# param-count
# ---------------------------------------------------------------------------

@cli.command("param-count")
@click.option("--model", "kind", type=click.Choice(MODEL_KINDS), required=True)
@config_option
@set_option
def param_count_cmd(kind, config, sets):
    """Print total and per-submodule trainable parameter counts."""
    mc, _, _ = _configs(config, sets, {"model.kind": kind})
    _setup()
    breakdown = param_breakdown(mc)
    model = build_model(mc)
    built = {name: sum(p.numel() for p in child.parameters() if p.requires_grad)
             for name, child in model.named_children()}
    built = {("post_transformer" if k == "post" else k): v for k, v in built.items()}
    for name, count in breakdown.items():
        if name != "total" and built.get(name) != count:
            raise RuntimeError(f"{name}: built module has {built.get(name)} parameters, formula gives {count}")
    width = max(len(k) for k in breakdown)
    for name, count in breakdown.items():
        click.echo(f"{name:<{width}}  {count:>12,d}")
    if param_count(model) != breakdown["total"]:
        raise RuntimeError("total parameter count mismatch")


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="ambisep", standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except click.Abort:
        click.echo("aborted", err=True)
        sys.exit(1)
    except Exception as exc:  # noqa: BLE001  runtime failure
        log.debug("failure", exc_info=True)
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    sys.exit(0)


if __name__ == "__main__":
    main()
