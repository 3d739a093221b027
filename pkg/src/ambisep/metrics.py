"""Multichannel scale-invariant SDR, permutation search and spatial metrics.

All metrics take signals shaped (J, channels, N). A source uses one scale
for all of its channels, so a per-channel gain change counts as
distortion.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import torch
from scipy.linalg import lstsq
from scipy.optimize import linear_sum_assignment

CAP_DB = 300.0
# error/target power ratios below this are rounding noise and reported as CAP_DB
_PERFECT_RATIO = 1e-20
LOSS_ERROR_FLOOR = 1e-12


@dataclass
class ScaledAlignment:
    permutation: tuple[int, ...]  # permutation[j] = estimate index matched to reference j
    alphas: np.ndarray


def _db(target_power, error_power):
    if error_power <= _PERFECT_RATIO * target_power:
        return CAP_DB
    return min(CAP_DB, 10.0 * np.log10(target_power / error_power))


def optimal_scale(estimate: np.ndarray, reference: np.ndarray) -> float:
    """Common least-squares scale of ``reference`` towards ``estimate`` over all channels."""
    power = np.sum(reference * reference)
    if power == 0:
        raise ValueError("reference has zero power")
    return float(np.sum(estimate * reference) / power)


def pair_si_sdr(estimate: np.ndarray, reference: np.ndarray) -> tuple[float, float]:
    """SI-SDR in dB of one multichannel estimate against one reference, and its scale."""
    estimate = np.asarray(estimate, dtype=float)
    reference = np.asarray(reference, dtype=float)
    alpha = optimal_scale(estimate, reference)
    target = alpha * reference
    return _db(np.sum(target**2), np.sum((estimate - target) ** 2)), alpha


def pit_permutation(loss_matrix) -> tuple[int, ...]:
    """Assignment minimising the summed loss.

    ``loss_matrix[j, k]`` is the loss of pairing reference j with estimate k;
    the result maps each reference to an estimate. Exhaustive for J <= 3,
    Hungarian beyond.
    """
    loss = np.asarray(loss_matrix, dtype=float)
    if loss.ndim != 2 or loss.shape[0] != loss.shape[1]:
        raise ValueError(f"loss matrix must be square, got shape {loss.shape}")
    n = loss.shape[0]
    if n <= 3:
        best = min(itertools.permutations(range(n)), key=lambda p: sum(loss[j, p[j]] for j in range(n)))
        return tuple(best)
    rows, cols = linear_sum_assignment(loss)
    return tuple(int(c) for c in cols[np.argsort(rows)])


def _check_pair(estimates, references):
    estimates = np.asarray(estimates, dtype=float)
    references = np.asarray(references, dtype=float)
    if estimates.shape != references.shape or estimates.ndim != 3:
        raise ValueError(f"estimates {estimates.shape} and references {references.shape} must both be (J, channels, N)")
    for j, ref in enumerate(references):
        if not np.any(ref):
            raise ValueError(f"reference {j} has zero power")
    return estimates, references


def multichannel_si_sdr(estimates, references) -> tuple[float, ScaledAlignment]:
    """Mean multichannel SI-SDR (dB) under the best estimate/reference pairing."""
    estimates, references = _check_pair(estimates, references)
    n = len(references)
    table = np.empty((n, n))
    scales = np.empty((n, n))
    for j in range(n):
        for k in range(n):
            table[j, k], scales[j, k] = pair_si_sdr(estimates[k], references[j])
    perm = pit_permutation(-table)
    value = float(np.mean([table[j, perm[j]] for j in range(n)]))
    return value, ScaledAlignment(perm, np.array([scales[j, perm[j]] for j in range(n)]))


def si_sdri(mixture, estimates, references) -> float:
    """SI-SDR of the estimates minus SI-SDR of the mixture used as every estimate."""
    estimates, references = _check_pair(estimates, references)
    mixture = np.asarray(mixture, dtype=float)
    baseline, _ = multichannel_si_sdr(np.broadcast_to(mixture, references.shape), references)
    value, _ = multichannel_si_sdr(estimates, references)
    return value - baseline


def _delayed_basis(reference: np.ndarray, taps: int) -> np.ndarray:
    """Columns are every channel of ``reference`` delayed by 0..taps-1 samples, shape (N, channels*taps)."""
    ch, n = reference.shape
    basis = np.zeros((n, ch, taps))
    for d in range(taps):
        basis[d:, :, d] = reference[:, : n - d].T
    return basis.reshape(n, ch * taps)


def _projection_coefficients(basis, targets):
    gram = basis.T @ basis
    rhs = basis.T @ targets
    coef, _, rank, _ = lstsq(basis, targets, lapack_driver="gelsd")
    if rank < basis.shape[1]:
        ridge = 1e-9 * np.trace(gram)
        coef = np.linalg.solve(gram + ridge * np.eye(len(gram)), rhs)
    return coef


def pair_si_isr(estimate: np.ndarray, reference: np.ndarray, taps: int = 32) -> float:
    """Scale-invariant image-to-spatial-distortion ratio of one source, in dB.

    The spatial image of the estimate is its least-squares projection onto
    the span of all reference channels delayed by 0..taps-1 samples
    (arbitrary multichannel filtering of the reference). The target is the
    closest version of the reference filtered by one filter shared by all
    channels; with one tap this is the common SI-SDR scale. The ratio
    compares target power with the distance between the two, so only
    channel-dependent (spatial) distortion is penalised.
    """
    estimate = np.asarray(estimate, dtype=float)
    reference = np.asarray(reference, dtype=float)
    ch, n = reference.shape
    basis = _delayed_basis(reference, taps)
    image = basis @ _projection_coefficients(basis, estimate.T)  # (N, ch)
    # shared filter: stack the channels so one coefficient vector serves all of them
    shared_basis = np.concatenate([_delayed_basis(reference[c : c + 1], taps) for c in range(ch)], axis=0)
    shared = shared_basis @ _projection_coefficients(shared_basis, estimate.reshape(-1))
    target = shared.reshape(ch, n).T
    return _db(np.sum(target**2), np.sum((image - target) ** 2))


def si_isr(estimates, references, taps: int = 32) -> float:
    """Mean SI-ISR over sources after permutation alignment via SI-SDR."""
    estimates, references = _check_pair(estimates, references)
    _, alignment = multichannel_si_sdr(estimates, references)
    return float(np.mean([pair_si_isr(estimates[k], references[j], taps) for j, k in enumerate(alignment.permutation)]))


def evaluate_example(mixture, estimates, references, taps: int = 32) -> dict:
    """Per-example record with SI-SDR, SI-SDRi, SI-ISR, permutation and scales."""
    estimates, references = _check_pair(estimates, references)
    sdr, alignment = multichannel_si_sdr(estimates, references)
    mix = np.broadcast_to(np.asarray(mixture, dtype=float), references.shape)
    base, _ = multichannel_si_sdr(mix, references)
    isr = float(np.mean([pair_si_isr(estimates[k], references[j], taps) for j, k in enumerate(alignment.permutation)]))
    return {
        "si_sdr": sdr,
        "si_sdri": sdr - base,
        "si_isr": isr,
        "permutation": list(alignment.permutation),
        "alphas": alignment.alphas.tolist(),
        "isr_taps": taps,
    }


def summarize(records: list[dict], keys=("si_sdr", "si_sdri", "si_isr")) -> dict:
    out = {"count": len(records)}
    for k in keys:
        vals = np.array([r[k] for r in records], dtype=float)
        out[k] = {"mean": float(vals.mean()) if len(vals) else float("nan"),
                  "std": float(vals.std()) if len(vals) else float("nan")}
    return out


# ---------------------------------------------------------------------------
# differentiable training loss
# ---------------------------------------------------------------------------

def pairwise_si_sdr(estimates: torch.Tensor, references: torch.Tensor) -> torch.Tensor:
    """SI-SDR (dB) for every (reference j, estimate k) pair.

    estimates, references: (B, J, channels, N). Returns (B, J, J) indexed
    [b, j, k]. The error power is floored at ``LOSS_ERROR_FLOOR``.
    """
    ref = references.unsqueeze(2)  # (B, J, 1, ch, N)
    est = estimates.unsqueeze(1)  # (B, 1, J, ch, N)
    ref_power = references.pow(2).sum(dim=(-1, -2)).unsqueeze(2)  # (B, J, 1)
    alpha = (est * ref).sum(dim=(-1, -2)) / ref_power
    target = alpha[..., None, None] * ref
    target_power = target.pow(2).sum(dim=(-1, -2))
    error_power = (est - target).pow(2).sum(dim=(-1, -2)).clamp_min(LOSS_ERROR_FLOOR)
    return 10.0 * torch.log10(target_power / error_power)


def pit_si_sdr_loss(estimates: torch.Tensor, references: torch.Tensor):
    """Negative mean SI-SDR under the best utterance-level permutation.

    Returns the batch-mean loss and the chosen permutations (B, J).
    """
    table = pairwise_si_sdr(estimates, references)
    n = table.shape[1]
    perms = list(itertools.permutations(range(n)))
    idx = torch.arange(n)
    scores = torch.stack([table[:, idx, torch.tensor(p)].mean(dim=1) for p in perms], dim=1)  # (B, P)
    best = scores.argmax(dim=1)
    loss = -scores.gather(1, best[:, None]).mean()
    return loss, torch.tensor([perms[i] for i in best.tolist()])
