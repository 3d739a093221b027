"""Real SN3D spherical harmonics and the plane-wave-domain transform.

Channels follow ACN ordering (index ``l*l + l + m``) and SN3D
normalisation without the Condon-Shortley phase, i.e. the AmbiX
convention. The plane-wave encoder beamforms an order-L Ambisonic signal
towards ``Q = (L+1)**2`` directions with maximum-directivity weights
``sqrt(2l+1) * Y_lm``; the decoder is the pseudo-inverse of that matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np
import torch
from scipy.special import lpmv


def n_channels(order: int) -> int:
    return (order + 1) ** 2


def acn(l: int, m: int) -> int:
    return l * l + l + m


def real_sh(l: int, m: int, azimuth, elevation):
    """SN3D real spherical harmonic of order ``l`` and mode ``m``.

    Azimuth is counter-clockwise from +x, elevation upwards from the
    horizontal plane, both in radians. Accepts scalars or arrays.
    """
    if l < 0 or abs(m) > l:
        raise ValueError(f"invalid spherical harmonic index l={l}, m={m}")
    azimuth = np.asarray(azimuth, dtype=float)
    elevation = np.asarray(elevation, dtype=float)
    am = abs(m)
    norm = np.sqrt((2.0 - (m == 0)) * factorial(l - am) / factorial(l + am))
    # scipy's associated Legendre includes the Condon-Shortley phase
    legendre = (-1.0) ** am * lpmv(am, l, np.sin(elevation))
    if m >= 0:
        return norm * legendre * np.cos(am * azimuth)
    return norm * legendre * np.sin(am * azimuth)


def sh_matrix(order: int, azimuth, elevation) -> np.ndarray:
    """Real SN3D harmonics up to ``order`` for each direction, shape (Q, (L+1)^2)."""
    azimuth = np.atleast_1d(np.asarray(azimuth, dtype=float))
    elevation = np.atleast_1d(np.asarray(elevation, dtype=float))
    out = np.empty((azimuth.size, n_channels(order)))
    for l in range(order + 1):
        for m in range(-l, l + 1):
            out[:, acn(l, m)] = real_sh(l, m, azimuth, elevation)
    return out


def _tetrahedron():
    verts = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) / np.sqrt(3.0)
    az = np.mod(np.arctan2(verts[:, 1], verts[:, 0]), 2 * np.pi)
    el = np.arcsin(verts[:, 2])
    return np.stack([az, el], axis=1)


# (azimuth, elevation) designs with (L+1)^2 points, obtained offline by
# minimising cond(Y) starting from a Fibonacci lattice.
_STORED_DESIGNS: dict[int, list[tuple[float, float]]] = {
    2: [
        (5.179615916321234, 0.9977235465139686),
        (2.8667107873004523, 0.7899623447617347),
        (0.5740367656802783, 0.4839175991841465),
        (4.095122271483677, 0.10071366073205323),
        (1.7757203635683676, 0.028093200003185104),
        (5.734407624124113, -0.13834561093446868),
        (2.9389727461678676, -0.4682348492328106),
        (0.7191487265614841, -0.7584344920436721),
        (4.622900132235154, -1.0501275518979125),
    ],
    3: [
        (5.082695840595284, 0.9518313913665811),
        (2.7706348203110034, 0.9502152433242874),
        (0.33185356795062565, 0.9271970160002451),
        (3.9292278876824365, 0.5577309950137953),
        (1.5750938360627138, 0.619220738094626),
        (5.869045759355842, 0.25055817575218),
        (3.2346563378229476, 0.027242051050578534),
        (0.764037556151342, 0.05815779945914737),
        (4.7927321453378955, 0.027655301920984386),
        (2.3090530826037927, 0.08788016274606726),
        (0.18097896234641198, -0.5847796983401662),
        (4.081051534928786, -0.5938449157800387),
        (1.4326591175267647, -0.5788616049490292),
        (5.345204471613097, -0.590187115897034),
        (2.671107961544454, -0.7855698145618318),
        (0.49605677522355857, -1.5306081945641132),
    ],
}


def _fibonacci(n_points: int) -> np.ndarray:
    i = np.arange(n_points) + 0.5
    el = np.arcsin(1.0 - 2.0 * i / n_points)
    az = np.mod(np.pi * (1.0 + np.sqrt(5.0)) * i, 2 * np.pi)
    return np.stack([az, el], axis=1)


def default_grid(order: int) -> np.ndarray:
    """Near-uniform plane-wave directions for ``order``, shape (Q, 2) as (azimuth, elevation).

    Order 0 uses the single direction (0, 0), order 1 a regular tetrahedron,
    higher orders a stored design (or a Fibonacci lattice beyond the stored
    range).
    """
    if order < 0:
        raise ValueError(f"order must be >= 0, got {order}")
    if order == 0:
        return np.zeros((1, 2))
    if order == 1:
        return _tetrahedron()
    if order in _STORED_DESIGNS:
        return np.array(_STORED_DESIGNS[order], dtype=float)
    return _fibonacci(n_channels(order))


@dataclass(frozen=True)
class PwdMatrix:
    """Plane-wave encoder ``Y`` (Q x (L+1)^2) and its pseudo-inverse ``Ydag``."""

    order: int
    directions: np.ndarray
    Y: np.ndarray
    Ydag: np.ndarray

    @property
    def n_directions(self) -> int:
        return self.Y.shape[0]

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.Y))

    def to_text(self) -> str:
        """``Y`` then ``Ydag``, one matrix row per line at full double precision."""
        lines = [f"# order {self.order}", "# Y"]
        lines += [" ".join(f"{v:.17g}" for v in row) for row in self.Y]
        lines.append("# Ydag")
        lines += [" ".join(f"{v:.17g}" for v in row) for row in self.Ydag]
        return "\n".join(lines) + "\n"


def build_pwd_matrix(order: int, directions=None, rcond: float = 1e-10) -> PwdMatrix:
    if directions is None:
        directions = default_grid(order)
    directions = np.asarray(directions, dtype=float).reshape(-1, 2)
    if len(directions) != n_channels(order):
        raise ValueError(f"order {order} needs {n_channels(order)} directions, got {len(directions)}")
    weights = np.concatenate([np.full(2 * l + 1, np.sqrt(2 * l + 1)) for l in range(order + 1)])
    Y = sh_matrix(order, directions[:, 0], directions[:, 1]) * weights
    s = np.linalg.svd(Y, compute_uv=False)
    if s[-1] <= rcond * s[0]:
        raise ValueError(
            f"plane-wave matrix is rank deficient for this grid (singular values {s[0]:.3g} .. {s[-1]:.3g}); "
            "use a more uniform set of directions"
        )
    return PwdMatrix(order, directions, Y, np.linalg.pinv(Y))


def _apply(matrix: np.ndarray, x, n_in: int, what: str):
    if x.shape[-2] != n_in:
        raise ValueError(f"{what}: expected {n_in} channels on axis -2, got {x.shape[-2]}")
    if isinstance(x, torch.Tensor):
        return torch.as_tensor(matrix, dtype=x.dtype, device=x.device) @ x
    return matrix @ np.asarray(x)


def pwd_encode(x, M: PwdMatrix):
    """Ambisonic signal (..., (L+1)^2, N) -> plane-wave signal (..., Q, N)."""
    return _apply(M.Y, x, M.Y.shape[1], "pwd_encode")


def pwd_decode(p, M: PwdMatrix):
    """Plane-wave signal (..., Q, N) -> Ambisonic signal (..., (L+1)^2, N)."""
    return _apply(M.Ydag, p, M.Ydag.shape[1], "pwd_decode")


def encode_plane_wave(order: int, azimuth: float, elevation: float) -> np.ndarray:
    """SN3D Ambisonic gains of a unit plane wave from the given direction."""
    return sh_matrix(order, azimuth, elevation)[0]
