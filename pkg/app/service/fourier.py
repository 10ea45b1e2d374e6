"""
Fourier Domain Transfer Service
Builds target-like images by giving a source image the low-frequency amplitude
spectrum of a target image while keeping the source phase.
"""
import numpy as np

from app.core.exceptions import DimensionError, ParameterError
from app.schema.scene import Spectrum, validate_image


def fft2d(image: np.ndarray) -> Spectrum:
    """
    Per-channel 2D DFT of an (H, W, C) image in DC-centred layout

    Returns:
        Spectrum with coefficients shaped (C, H, W)
    """
    image = validate_image(np.asarray(image, dtype=np.float64))
    planes = np.moveaxis(image, 2, 0)
    coeffs = np.fft.fftshift(np.fft.fft2(planes, axes=(-2, -1)), axes=(-2, -1))
    return Spectrum(height=image.shape[0], width=image.shape[1], coeffs=coeffs)


def ifft2d(spectrum: Spectrum) -> np.ndarray:
    """Inverse of fft2d; the imaginary residue is discarded"""
    if spectrum.height < 8 or spectrum.width < 8:
        raise DimensionError("spectrum sides must be >= 8", (spectrum.height, spectrum.width))
    planes = np.fft.ifft2(np.fft.ifftshift(spectrum.coeffs, axes=(-2, -1)), axes=(-2, -1)).real
    return np.moveaxis(planes, 0, 2)


def low_frequency_window(height: int, width: int, beta: float) -> np.ndarray:
    """
    Boolean (H, W) mask of the swapped bins: the square of half-side
    floor(beta * min(H, W)) around the DC bin, empty when that half-side is 0.
    """
    if not 0.0 <= beta <= 0.5:
        raise ParameterError(f"beta must lie in [0, 0.5], got {beta}")
    b = int(np.floor(beta * min(height, width)))
    mask = np.zeros((height, width), dtype=bool)
    if b == 0:
        return mask
    ch, cw = height // 2, width // 2
    mask[max(0, ch - b):min(height, ch + b + 1), max(0, cw - b):min(width, cw + b + 1)] = True
    return mask


def fda_spectrum(src: np.ndarray, tgt: np.ndarray, beta: float) -> Spectrum:
    """Mixed spectrum: src phase everywhere, tgt amplitude inside the window"""
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if src.shape != tgt.shape:
        raise DimensionError("fda_transfer needs images of identical shape", src.shape, tgt.shape)
    window = low_frequency_window(src.shape[0], src.shape[1], beta)
    s, t = fft2d(src), fft2d(tgt)
    amplitude = np.where(window[None], t.amplitude, s.amplitude)
    mixed = amplitude * np.exp(1j * s.phase)
    return Spectrum(height=s.height, width=s.width, coeffs=mixed)


def fda_transfer(src: np.ndarray, tgt: np.ndarray, beta: float) -> np.ndarray:
    """Target-like version of ``src``, clamped to [0, 1]"""
    return np.clip(ifft2d(fda_spectrum(src, tgt, beta)), 0.0, 1.0)
