"""Cross-domain augmentation by mixing low-frequency Fourier amplitudes.

An image's amplitude spectrum carries low-level appearance statistics while
the phase carries structure. Swapping (or interpolating) the central band of
the amplitude between two images re-styles one image with the other's
appearance while keeping its anatomy, which is the augmentation used to
synthesize extra "domains" during training.

All spectra here are centered: the DC bin sits at (H//2, W//2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class FourierError(Exception):
    pass


@dataclass(frozen=True)
class Spectrum:
    """Polar form of a centered complex spectrum: amplitude >= 0, phase in (-pi, pi]."""

    amplitude: np.ndarray
    phase: np.ndarray


@dataclass(frozen=True)
class MixConfig:
    """Amplitude-mixing parameters.

    lam is the interpolation weight toward the partner amplitude; alpha is
    the half-width of the central mask as a fraction of each side. strict
    mode applies the mixing formula literally, which also scales amplitude
    outside the mask by (1 - lam); rectified mode (default) confines the
    interpolation to the mask and leaves the rest untouched.
    """

    lam: float = 1.0
    alpha: float = 0.1
    mode: str = "rectified"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise FourierError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.alpha <= 0.5:
            raise FourierError(f"alpha must lie in [0, 0.5], got {self.alpha}")
        if self.mode not in ("strict", "rectified"):
            raise FourierError(f"mode must be 'strict' or 'rectified', got {self.mode!r}")


def _check_image(image: np.ndarray, op: str) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise FourierError(f"{op}: expected [H,W] or [C,H,W], got shape {arr.shape}")
    h, w = arr.shape[-2], arr.shape[-1]
    if h < 2 or w < 2 or arr.size == 0:
        raise FourierError(f"{op}: image too small or empty, shape {arr.shape}")
    return arr


def fft2d(image: np.ndarray) -> np.ndarray:
    """Per-channel 2D DFT, quadrant-swapped so the DC bin is centered."""
    arr = _check_image(image, "fft2d")
    return np.fft.fftshift(np.fft.fft2(arr, axes=(-2, -1)), axes=(-2, -1))


def ifft2d(spectrum: np.ndarray) -> np.ndarray:
    """Inverse of fft2d; returns the complex image (callers drop the residue)."""
    arr = np.asarray(spectrum)
    if arr.ndim not in (2, 3) or arr.shape[-1] < 2 or arr.shape[-2] < 2:
        raise FourierError(f"ifft2d: bad spectrum shape {arr.shape}")
    return np.fft.ifft2(np.fft.ifftshift(arr, axes=(-2, -1)), axes=(-2, -1))


def decompose(spectrum: np.ndarray) -> Spectrum:
    """Split a complex spectrum into amplitude and phase (zero bins get phase 0)."""
    arr = np.asarray(spectrum)
    return Spectrum(amplitude=np.abs(arr), phase=np.angle(arr))


def recompose(spec: Spectrum) -> np.ndarray:
    return spec.amplitude * np.exp(1j * spec.phase)


def build_mask(alpha: float, h: int, w: int) -> np.ndarray:
    """Binary [H,W] mask of the centered low-frequency rectangle.

    A row r is inside the band when (r - H//2) lies in [-floor(alpha*H),
    ceil(alpha*H) - 1], and likewise for columns. The floor/ceil split makes
    alpha=0 give an empty band and alpha=0.5 cover every row for odd and
    even sides alike. When alpha*H is an exact integer the band sits one bin
    off-center, which breaks conjugate symmetry; see augment().
    """
    if not 0.0 <= alpha <= 0.5:
        raise FourierError(f"alpha must lie in [0, 0.5], got {alpha}")
    if h < 1 or w < 1:
        raise FourierError(f"mask sides must be positive, got {(h, w)}")

    def band(n: int) -> np.ndarray:
        lo = -int(np.floor(alpha * n))
        hi = int(np.ceil(alpha * n)) - 1
        offs = np.arange(n) - n // 2
        return (offs >= lo) & (offs <= hi)

    mask = np.outer(band(h), band(w)).astype(np.float64)
    return mask


def mix_amplitudes(a: Spectrum, a_prime: Spectrum, cfg: MixConfig) -> np.ndarray:
    """Blend the partner's amplitude into the central band; phase is untouched."""
    if a.amplitude.shape != a_prime.amplitude.shape:
        raise FourierError(
            f"mix_amplitudes: shape mismatch {a.amplitude.shape} vs {a_prime.amplitude.shape}"
        )
    h, w = a.amplitude.shape[-2], a.amplitude.shape[-1]
    m = build_mask(cfg.alpha, h, w)
    lam = cfg.lam
    if cfg.mode == "strict":
        return (1.0 - lam) * a.amplitude * (1.0 - m) + lam * a_prime.amplitude * m
    return a.amplitude * (1.0 - m) + ((1.0 - lam) * a.amplitude + lam * a_prime.amplitude) * m


def augment(x: np.ndarray, x_prime: np.ndarray, cfg: MixConfig) -> np.ndarray:
    """Re-style x with x_prime's low-frequency amplitude; output in [0,1].

    The inverse transform of the mixed spectrum is ideally real; a small
    imaginary residue remains whenever the mask band is asymmetric (integral
    alpha*H) because conjugate symmetry is then only approximate. The
    residue is discarded and the real part clipped to the input range.
    """
    xa = _check_image(x, "augment")
    xb = _check_image(x_prime, "augment")
    if xa.shape != xb.shape:
        raise FourierError(f"augment: shape mismatch {xa.shape} vs {xb.shape}")
    if not (np.isfinite(xa).all() and np.isfinite(xb).all()):
        raise FourierError("augment: non-finite input values")

    spec_x = decompose(fft2d(xa))
    spec_p = decompose(fft2d(xb))
    mixed = mix_amplitudes(spec_x, spec_p, cfg)
    z_complex = ifft2d(recompose(Spectrum(amplitude=mixed, phase=spec_x.phase)))
    return np.clip(z_complex.real, 0.0, 1.0)
