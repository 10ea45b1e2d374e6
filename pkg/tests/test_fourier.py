import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from app.core.exceptions import DimensionError, ParameterError
from app.schema.scene import Spectrum
from app.service.fourier import fda_spectrum, fda_transfer, fft2d, ifft2d, low_frequency_window


def _image(seed, h=64, w=64, c=3):
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(h, w, c))


def test_constant_image_puts_energy_at_dc():
    spectrum = fft2d(np.full((8, 8, 1), 0.4))
    amplitude = spectrum.amplitude[0]
    ch, cw = spectrum.center
    assert amplitude[ch, cw] == pytest.approx(0.4 * 64)
    amplitude[ch, cw] = 0.0
    assert np.abs(amplitude).max() < 1e-12


def test_round_trip():
    image = _image(0, 20, 13)
    assert np.abs(ifft2d(fft2d(image)) - image).max() < 1e-10


def test_matches_naive_dft():
    image = _image(1, 8, 8, 1)
    x = image[:, :, 0]
    n = 8
    naive = np.zeros((n, n), dtype=complex)
    for u in range(n):
        for v in range(n):
            for i in range(n):
                for j in range(n):
                    naive[u, v] += x[i, j] * np.exp(-2j * np.pi * (u * i / n + v * j / n))
    coeffs = np.fft.ifftshift(fft2d(image).coeffs[0])
    assert np.abs(coeffs - naive).max() < 1e-8


def test_small_images_rejected():
    with pytest.raises(DimensionError):
        fft2d(np.zeros((7, 8, 1)))
    with pytest.raises(DimensionError):
        ifft2d(Spectrum(height=4, width=4, coeffs=np.zeros((1, 4, 4), dtype=complex)))


def test_fda_beta_zero_is_identity():
    src, tgt = _image(2), _image(3)
    assert np.abs(fda_transfer(src, tgt, 0.0) - src).max() < 1e-5


def test_fda_same_target_is_identity():
    src = _image(4)
    assert np.abs(fda_transfer(src, src, 0.3) - src).max() < 1e-5


def test_fda_takes_target_dc_amplitude():
    src, tgt = _image(5) * 0.5, _image(6) * 0.5 + 0.25
    mixed = fda_spectrum(src, tgt, 0.1)
    ch, cw = mixed.center
    np.testing.assert_allclose(mixed.amplitude[:, ch, cw], fft2d(tgt).amplitude[:, ch, cw], rtol=1e-15)
    assert abs(fda_transfer(src, tgt, 0.1).mean() - tgt.mean()) < abs(src.mean() - tgt.mean())


def test_fda_amplitude_provenance_and_phase():
    src, tgt = _image(7), _image(8)
    mixed = fda_spectrum(src, tgt, 0.1)
    window = low_frequency_window(64, 64, 0.1)
    s, t = fft2d(src), fft2d(tgt)
    np.testing.assert_allclose(mixed.amplitude[:, window], t.amplitude[:, window], rtol=1e-12)
    np.testing.assert_allclose(mixed.amplitude[:, ~window], s.amplitude[:, ~window], rtol=1e-12)
    live = (s.amplitude > 1e-12) & (mixed.amplitude > 1e-12)
    diff = np.angle(np.exp(1j * (mixed.phase - s.phase)))
    assert np.abs(diff[live]).max() < 1e-8


def test_fda_contracts():
    with pytest.raises(DimensionError):
        fda_transfer(_image(0, 16, 16), _image(1, 16, 17), 0.1)
    with pytest.raises(ParameterError):
        fda_transfer(_image(0, 16, 16), _image(1, 16, 16), 0.6)


def test_window_half_side():
    window = low_frequency_window(64, 64, 0.1)
    assert window.sum() == (2 * 6 + 1) ** 2
    assert not low_frequency_window(64, 64, 0.01).any()


@settings(max_examples=50)
@given(st.floats(0.0, 0.5), st.floats(0.0, 0.5), st.integers(8, 40), st.integers(8, 40))
def test_window_is_monotone(b1, b2, h, w):
    lo, hi = sorted((b1, b2))
    small = low_frequency_window(h, w, lo)
    large = low_frequency_window(h, w, hi)
    assert not (small & ~large).any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.5))
def test_fda_output_in_unit_range(seed, beta):
    out = fda_transfer(_image(seed, 16, 16), _image(seed + 1, 16, 16), beta)
    assert out.min() >= 0.0 and out.max() <= 1.0
