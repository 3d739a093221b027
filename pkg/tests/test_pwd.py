import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ambisep import pwd


def _closed_form(az, el):
    """Hand-written SN3D harmonics up to order 2 (ACN order, no Condon-Shortley phase)."""
    c, s = np.cos(el), np.sin(el)
    r3 = np.sqrt(3.0)
    return np.array([
        np.ones_like(az),
        np.sin(az) * c,
        s,
        np.cos(az) * c,
        r3 / 2 * np.sin(2 * az) * c**2,
        r3 * np.sin(az) * s * c,
        (3 * s**2 - 1) / 2,
        r3 * np.cos(az) * s * c,
        r3 / 2 * np.cos(2 * az) * c**2,
    ]).T


@given(st.floats(0, 2 * np.pi), st.floats(-np.pi / 2, np.pi / 2))
def test_harmonics_match_closed_form(az, el):
    np.testing.assert_allclose(pwd.sh_matrix(2, az, el)[0], _closed_form(np.array(az), np.array(el)), atol=1e-12)


@pytest.mark.parametrize("order", [1, 2, 3])
def test_sn3d_orthogonality(order):
    # Gauss-Legendre in sin(elevation) times a uniform azimuth grid integrates these exactly
    x, w = np.polynomial.legendre.leggauss(order + 2)
    n_az = 2 * order + 3
    az = np.arange(n_az) * 2 * np.pi / n_az
    A, X = np.meshgrid(az, x, indexing="ij")
    W = np.broadcast_to(w, A.shape) * 2 * np.pi / n_az
    Y = pwd.sh_matrix(order, A.ravel(), np.arcsin(X.ravel()))
    gram = Y.T @ (W.ravel()[:, None] * Y)
    degrees = np.concatenate([[l] * (2 * l + 1) for l in range(order + 1)])
    np.testing.assert_allclose(gram, np.diag(4 * np.pi / (2 * degrees + 1)), atol=1e-12)


def test_invalid_harmonic_index():
    with pytest.raises(ValueError):
        pwd.real_sh(1, 2, 0.0, 0.0)


def test_acn_index():
    assert [pwd.acn(l, m) for l in range(3) for m in range(-l, l + 1)] == list(range(9))


def test_tetrahedral_matrix_is_plus_minus_one():
    M = pwd.build_pwd_matrix(1)
    np.testing.assert_allclose(np.abs(M.Y), 1.0, atol=1e-14)
    np.testing.assert_allclose(M.Ydag, M.Y.T / 4, atol=1e-14)
    np.testing.assert_allclose(M.Ydag @ M.Y, np.eye(4), atol=1e-12)
    assert M.condition_number == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("order, max_cond", [(2, 1.4), (3, 1.6), (4, 4.0)])
def test_higher_order_grids_are_well_conditioned(order, max_cond):
    M = pwd.build_pwd_matrix(order)
    assert M.n_directions == (order + 1) ** 2
    assert M.condition_number < max_cond
    np.testing.assert_allclose(M.Ydag @ M.Y, np.eye(M.n_directions), atol=1e-10)


def test_rank_deficient_grid_rejected():
    with pytest.raises(ValueError, match="rank deficient"):
        pwd.build_pwd_matrix(1, np.zeros((4, 2)))


def test_wrong_direction_count_rejected():
    with pytest.raises(ValueError):
        pwd.build_pwd_matrix(1, np.zeros((3, 2)))


@settings(max_examples=25)
@given(st.integers(0, 3), st.integers(1, 64), st.integers(0, 2**31 - 1))
def test_round_trip_numpy(order, n, seed):
    M = pwd.build_pwd_matrix(order)
    x = np.random.default_rng(seed).standard_normal((2, pwd.n_channels(order), n))
    back = pwd.pwd_decode(pwd.pwd_encode(x, M), M)
    assert np.linalg.norm(back - x) <= 1e-10 * np.linalg.norm(x)


def test_round_trip_torch_keeps_dtype():
    M = pwd.build_pwd_matrix(1)
    x = torch.randn(3, 4, 10, dtype=torch.float64)
    y = pwd.pwd_encode(x, M)
    assert isinstance(y, torch.Tensor) and y.dtype == torch.float64
    assert torch.allclose(pwd.pwd_decode(y, M), x, atol=1e-12)


def test_channel_mismatch():
    M = pwd.build_pwd_matrix(1)
    with pytest.raises(ValueError, match="channels"):
        pwd.pwd_encode(np.zeros((9, 5)), M)


def test_plane_wave_beam_peaks_at_its_direction():
    M = pwd.build_pwd_matrix(1)
    for q, (az, el) in enumerate(M.directions):
        beams = M.Y @ pwd.encode_plane_wave(1, az, el)
        assert int(np.argmax(beams)) == q
        # sum over l of sqrt(2l+1) P_l(1)
        assert beams[q] == pytest.approx(1 + np.sqrt(3))


def test_front_row_of_encoder():
    M = pwd.build_pwd_matrix(1, [[0, 0], [np.pi / 2, 0], [0, np.pi / 2], [np.pi, -0.3]])
    np.testing.assert_allclose(M.Y[0], [1, 0, 0, np.sqrt(3)], atol=1e-15)


def test_text_export_round_trips():
    M = pwd.build_pwd_matrix(2)
    rows = [line for line in M.to_text().splitlines() if not line.startswith("#")]
    values = np.array([[float(v) for v in r.split()] for r in rows])
    np.testing.assert_array_equal(values[:9], M.Y)
    np.testing.assert_array_equal(values[9:], M.Ydag)
