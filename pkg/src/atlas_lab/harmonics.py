"""Spherical harmonic analysis and synthesis on equiangular grids.

Harmonics are orthonormal over the unit sphere with the Condon-Shortley
phase. Coefficients of real fields are stored for ``m >= 0`` only, as a
complex array ``a[..., l, m]`` of shape ``(lmax+1, lmax+1)`` that is zero
above the diagonal; negative orders follow from
``a[l, -m] = (-1)**m * conj(a[l, m])``.

Longitude is integrated with an exact discrete Fourier sum. Latitude uses
Gauss-Legendre quadrature after resampling each Fourier row to Gauss nodes
through its trigonometric interpolant in colatitude (a cosine series for
even ``m``, a sine series for odd ``m``), which is exact for band-limited
fields.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .grid import GridSpec


def normalized_legendre(lmax: int, theta: np.ndarray) -> np.ndarray:
    """Orthonormal associated Legendre functions ``P[l, m, k]`` at colatitudes ``theta``.

    ``Y_lm(theta, phi) = P[l, m] * exp(i m phi)`` integrates to one over the sphere.
    """
    theta = np.asarray(theta, dtype=np.float64)
    x, s = np.cos(theta), np.sin(theta)
    p = np.zeros((lmax + 1, lmax + 1, theta.size))
    p[0, 0] = np.sqrt(1.0 / (4.0 * np.pi))
    for m in range(1, lmax + 1):
        p[m, m] = -np.sqrt((2 * m + 1) / (2.0 * m)) * s * p[m - 1, m - 1]
    for m in range(lmax):
        p[m + 1, m] = np.sqrt(2 * m + 3.0) * x * p[m, m]
    for m in range(lmax + 1):
        for l in range(m + 2, lmax + 1):
            a = np.sqrt((4.0 * l * l - 1) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1) ** 2 - 1))
            p[l, m] = a * (x * p[l - 1, m] - b * p[l - 2, m])
    return p


def _trig_resampler(theta_src: np.ndarray, theta_dst: np.ndarray, odd: bool) -> np.ndarray:
    n = len(theta_src) - 1
    if odd:
        k = np.arange(1, n)
        basis = np.sin(np.outer(theta_src[1:-1], k))
        out = np.sin(np.outer(theta_dst, k)) @ np.linalg.inv(basis)
        return np.pad(out, ((0, 0), (1, 1)))
    k = np.arange(0, n + 1)
    basis = np.cos(np.outer(theta_src, k))
    return np.cos(np.outer(theta_dst, k)) @ np.linalg.inv(basis)


@dataclass(frozen=True)
class _Tables:
    fourier: np.ndarray  # (L+1, n_lon) complex, forward longitude integral
    project: np.ndarray  # (m, l, n_lat) latitude projection incl. quadrature weights
    legendre: np.ndarray  # (l, m, n_lat) at grid colatitudes, for synthesis


@functools.lru_cache(maxsize=16)
def _tables(n_lat: int, n_lon: int, lmax: int) -> _Tables:
    grid = GridSpec(n_lat, n_lon)
    theta = grid.colatitudes
    phi = grid.lon_radians
    m = np.arange(lmax + 1)
    fourier = (2.0 * np.pi / n_lon) * np.exp(-1j * np.outer(m, phi))
    mu, wq = np.polynomial.legendre.leggauss(n_lat)
    theta_g = np.arccos(mu)
    pg = normalized_legendre(lmax, theta_g)
    resample = {odd: _trig_resampler(theta, theta_g, odd) for odd in (False, True)}
    project = np.zeros((lmax + 1, lmax + 1, n_lat))
    for mm in range(lmax + 1):
        project[mm] = (pg[:, mm, :] * wq) @ resample[mm % 2 == 1]
    tabs = _Tables(fourier, project, normalized_legendre(lmax, theta))
    for arr in (tabs.fourier, tabs.project, tabs.legendre):
        arr.setflags(write=False)
    return tabs


def max_degree(grid: GridSpec) -> int:
    return (grid.n_lat - 1) // 2


def _check_lmax(grid: GridSpec, lmax: int):
    if lmax < 0 or lmax > max_degree(grid):
        raise ValueError(f"lmax={lmax} exceeds (n_lat-1)/2={max_degree(grid)} for grid {grid.shape}")
    if 2 * lmax >= grid.n_lon:
        raise ValueError(f"lmax={lmax} aliases in longitude for n_lon={grid.n_lon}")


@dataclass
class SphCoeffs:
    a: np.ndarray

    @property
    def lmax(self) -> int:
        return self.a.shape[-1] - 1

    def to_full(self) -> np.ndarray:
        """Array indexed ``[..., l, m + lmax]`` for ``-lmax <= m <= lmax``."""
        L = self.lmax
        full = np.zeros(self.a.shape[:-1] + (2 * L + 1,), dtype=complex)
        full[..., L:] = self.a
        m = np.arange(1, L + 1)
        full[..., L - m] = ((-1.0) ** m) * np.conj(self.a[..., 1:])
        return full

    @classmethod
    def from_full(cls, full: np.ndarray, atol: float = 1e-10) -> "SphCoeffs":
        L = (full.shape[-1] - 1) // 2
        a = full[..., L:]
        m = np.arange(1, L + 1)
        mirrored = ((-1.0) ** m) * np.conj(a[..., 1:])
        if not np.allclose(full[..., L - m], mirrored, atol=atol, rtol=0):
            raise ValueError("coefficients lack real-field conjugate symmetry")
        return cls(np.array(a))


def analyze(x: np.ndarray, grid: GridSpec, lmax: int) -> SphCoeffs:
    """Project a field (trailing axes ``(n_lat, n_lon)``) onto orthonormal harmonics."""
    _check_lmax(grid, lmax)
    if tuple(x.shape[-2:]) != grid.shape:
        raise ValueError(f"field shape {tuple(x.shape[-2:])} does not match grid {grid.shape}")
    t = _tables(grid.n_lat, grid.n_lon, lmax)
    rows = np.einsum("...ij,mj->...im", x, t.fourier)
    a = np.einsum("mli,...im->...lm", t.project, rows)
    return SphCoeffs(np.where(np.tri(lmax + 1, dtype=bool), a, 0.0))


def synthesize(c: SphCoeffs, grid: GridSpec, atol: float = 1e-10) -> np.ndarray:
    """Evaluate ``sum_lm a_lm Y_lm`` on the grid nodes (real output)."""
    a = np.asarray(c.a)
    L = c.lmax
    _check_lmax(grid, L)
    if np.max(np.abs(a[..., :, 0].imag), initial=0.0) > atol:
        raise ValueError("m=0 coefficients must be real for a real field")
    if np.max(np.abs(a[..., ~np.tri(L + 1, dtype=bool)]), initial=0.0) > atol:
        raise ValueError("coefficients with m > l must vanish")
    t = _tables(grid.n_lat, grid.n_lon, L)
    rows = np.einsum("lmi,...lm->...im", t.legendre, a)
    spec = np.zeros(rows.shape[:-1] + (grid.n_lon // 2 + 1,), dtype=complex)
    spec[..., : L + 1] = rows
    # irfft applies the hermitian completion for m < 0 and divides by n_lon
    return np.fft.irfft(spec, n=grid.n_lon, axis=-1) * grid.n_lon


def spectral_magnitudes(x: np.ndarray, grid: GridSpec, lmax: int) -> np.ndarray:
    """``|a_lm|`` for ``0 <= m <= l <= lmax``, flattened in row-major (l, m) order."""
    a = analyze(x, grid, lmax).a
    il, im = np.tril_indices(lmax + 1)
    return np.abs(a[..., il, im])


def power_spectrum(x: np.ndarray, grid: GridSpec, lmax: int, normalize: bool = False) -> np.ndarray:
    """Angular power ``P_l = sum_{m=-l}^{l} |a_lm|^2`` per total wavenumber."""
    a = analyze(x, grid, lmax).a
    p2 = np.abs(a) ** 2
    p = p2[..., 0] + 2.0 * p2[..., 1:].sum(axis=-1)
    if normalize:
        total = p.sum(axis=-1, keepdims=True)
        p = np.divide(p, total, out=np.zeros_like(p), where=total > 0)
    return p


class TorchAnalysis:
    """Differentiable real/imaginary harmonic analysis for torch tensors.

    Uses the same tables as :func:`analyze`; built once per grid and shared.
    """

    def __init__(self, grid: GridSpec, lmax: int, dtype=None):
        import torch

        _check_lmax(grid, lmax)
        t = _tables(grid.n_lat, grid.n_lon, lmax)
        dtype = dtype or torch.float32
        self.grid, self.lmax = grid, lmax
        self.f_re = torch.tensor(t.fourier.real, dtype=dtype)
        self.f_im = torch.tensor(t.fourier.imag, dtype=dtype)
        self.project = torch.tensor(t.project, dtype=dtype)
        il, im = np.tril_indices(lmax + 1)
        self.il, self.im = torch.from_numpy(il), torch.from_numpy(im)

    def coefficients(self, x):
        import torch

        rows_re = torch.einsum("...ij,mj->...im", x, self.f_re)
        rows_im = torch.einsum("...ij,mj->...im", x, self.f_im)
        re = torch.einsum("mli,...im->...lm", self.project, rows_re)
        im = torch.einsum("mli,...im->...lm", self.project, rows_im)
        return re[..., self.il, self.im], im[..., self.il, self.im]

    def magnitudes(self, x, eps: float = 1e-12):
        import torch

        re, im = self.coefficients(x)
        return torch.sqrt(re * re + im * im + eps)
