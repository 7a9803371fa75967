"""Equiangular latitude/longitude grids, area weights and resampling.

Row 0 is the north pole and the last row the south pole; column 0 sits on
the prime meridian. Fields are arrays whose two trailing axes are
``(n_lat, n_lon)``; any leading axes (batch, channel, time) pass through.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    n_lat: int
    n_lon: int

    def __post_init__(self):
        if self.n_lat < 3 or self.n_lat % 2 == 0:
            raise ValueError(f"n_lat must be odd and >= 3, got {self.n_lat}")
        if self.n_lon < 2:
            raise ValueError(f"n_lon must be >= 2, got {self.n_lon}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)

    @property
    def latitudes(self) -> np.ndarray:
        """Latitudes in degrees, +90 down to -90."""
        return 90.0 - 180.0 * np.arange(self.n_lat) / (self.n_lat - 1)

    @property
    def longitudes(self) -> np.ndarray:
        return 360.0 * np.arange(self.n_lon) / self.n_lon

    @property
    def colatitudes(self) -> np.ndarray:
        """Colatitudes in radians, 0 at the north pole."""
        return np.pi * np.arange(self.n_lat) / (self.n_lat - 1)

    @property
    def lon_radians(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_lon) / self.n_lon

    def coarsen(self, factor: int) -> "GridSpec":
        """Node-aligned coarse grid keeping every ``factor``-th row and column."""
        if factor < 1 or (self.n_lat - 1) % factor or self.n_lon % factor:
            raise ValueError(
                f"factor {factor} must divide n_lat-1={self.n_lat - 1} and n_lon={self.n_lon}"
            )
        return GridSpec((self.n_lat - 1) // factor + 1, self.n_lon // factor)


def area_weights(grid: GridSpec) -> np.ndarray:
    """Normalized cell-area weights, shape ``(n_lat, n_lon)``.

    Each row owns the latitude band between the midpoints to its neighbours,
    clamped to +-90 at the poles; the weight is proportional to
    ``sin(lat_upper) - sin(lat_lower)`` and the total sums to one.
    """
    lat = np.deg2rad(grid.latitudes)
    mid = 0.5 * (lat[:-1] + lat[1:])
    upper = np.concatenate([[np.pi / 2], mid])
    lower = np.concatenate([mid, [-np.pi / 2]])
    band = np.sin(upper) - np.sin(lower)
    # Make the two hemispheres bit-identical.
    band = 0.5 * (band + band[::-1])
    w = np.repeat(band[:, None], grid.n_lon, axis=1)
    return w / w.sum()


def _interp_matrix(src: np.ndarray, dst: np.ndarray, period: float | None) -> np.ndarray:
    """Linear interpolation weights from ``src`` nodes to ``dst`` points.

    ``src`` is uniformly spaced. With ``period`` set the coordinate wraps.
    """
    n_src = len(src)
    step = src[1] - src[0]
    pos = (dst - src[0]) / step
    if period is None:
        pos = np.clip(pos, 0.0, n_src - 1)
    else:
        pos = np.mod(pos, n_src)
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    # Snap values that are a node up to round-off, so coincident nodes copy exactly.
    near = np.isclose(frac, 0.0, atol=1e-9) | np.isclose(frac, 1.0, atol=1e-9)
    lo = np.where(near, np.rint(pos).astype(int), lo)
    frac = np.where(near, 0.0, frac)
    if period is None:
        lo = np.minimum(lo, n_src - 1)
        hi = np.minimum(lo + 1, n_src - 1)
    else:
        lo = lo % n_src
        hi = (lo + 1) % n_src
    m = np.zeros((len(dst), n_src))
    rows = np.arange(len(dst))
    m[rows, lo] += 1.0 - frac
    m[rows, hi] += frac
    return m


@functools.lru_cache(maxsize=32)
def resampling_matrices(src: GridSpec, dst: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Separable bilinear weights ``(W_lat [dst_lat, src_lat], W_lon [dst_lon, src_lon])``."""
    w_lat = _interp_matrix(src.colatitudes, dst.colatitudes, None)
    w_lon = _interp_matrix(src.lon_radians, dst.lon_radians, 2.0 * np.pi)
    w_lat.setflags(write=False)
    w_lon.setflags(write=False)
    return w_lat, w_lon


def _check_field(x, grid: GridSpec, channels: int | None):
    if tuple(x.shape[-2:]) != grid.shape:
        raise ValueError(f"field shape {tuple(x.shape[-2:])} does not match grid {grid.shape}")
    if channels is not None and (x.ndim < 3 or x.shape[-3] != channels):
        raise ValueError(f"expected {channels} channels, got shape {tuple(x.shape)}")


def _exact_subsample(src: GridSpec, dst: GridSpec) -> tuple[int, int] | None:
    if (src.n_lat - 1) % (dst.n_lat - 1) or src.n_lon % dst.n_lon:
        return None
    return (src.n_lat - 1) // (dst.n_lat - 1), src.n_lon // dst.n_lon


def bilinear_resample(x: np.ndarray, src: GridSpec, dst: GridSpec,
                      channels: int | None = None) -> np.ndarray:
    """Bilinear interpolation in (colatitude, longitude), periodic in longitude."""
    _check_field(x, src, channels)
    w_lat, w_lon = resampling_matrices(src, dst)
    return np.einsum("ai,...ij,bj->...ab", w_lat, x, w_lon, optimize=True)


def bilinear_downsample(x: np.ndarray, src: GridSpec, dst: GridSpec,
                        channels: int | None = None) -> np.ndarray:
    """The latent encoder ``B``: bilinear interpolation onto a coarser grid.

    For an integral, node-aligned factor every target node is a source node,
    so the result is a bit-exact copy of those values.
    """
    if dst.n_lat > src.n_lat or dst.n_lon > src.n_lon:
        raise ValueError("downsample target must not be finer than the source")
    step = _exact_subsample(src, dst)
    if step is not None:
        _check_field(x, src, channels)
        return np.ascontiguousarray(x[..., :: step[0], :: step[1]])
    return bilinear_resample(x, src, dst, channels)


def bilinear_upsample(z: np.ndarray, src: GridSpec, dst: GridSpec,
                      channels: int | None = None) -> np.ndarray:
    if dst.n_lat < src.n_lat or dst.n_lon < src.n_lon:
        raise ValueError("upsample target must not be coarser than the source")
    return bilinear_resample(z, src, dst, channels)


@functools.lru_cache(maxsize=64)
def pad_indices(n_lat: int, n_lon: int, halo: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column gather indices for :func:`spherical_pad`.

    Rows past a pole mirror across it: padded row ``-k`` reads row ``k`` with
    a half-turn longitude shift. Columns wrap circularly.
    """
    if halo < 1:
        raise ValueError("halo must be >= 1")
    if halo >= n_lon / 2 or halo >= n_lat:
        raise ValueError(f"halo {halo} too large for a {n_lat}x{n_lon} grid")
    if n_lon % 2:
        raise ValueError("cross-pole padding needs an even number of longitudes")
    rows = np.arange(-halo, n_lat + halo)
    cols = np.arange(-halo, n_lon + halo)
    r = np.empty((len(rows), len(cols)), dtype=np.int64)
    c = np.empty_like(r)
    for a, i in enumerate(rows):
        shift = 0
        if i < 0:
            i, shift = -i, n_lon // 2
        elif i > n_lat - 1:
            i, shift = 2 * (n_lat - 1) - i, n_lon // 2
        r[a, :] = i
        c[a, :] = (cols + shift) % n_lon
    r.setflags(write=False)
    c.setflags(write=False)
    return r, c


def spherical_pad(x, halo: int):
    """Pad the trailing two axes by ``halo`` cells with spherical continuity.

    Works on numpy arrays and torch tensors alike (a pure gather).
    """
    n_lat, n_lon = x.shape[-2:]
    r, c = pad_indices(n_lat, n_lon, halo)
    if not isinstance(x, np.ndarray):
        import torch

        r, c = torch.from_numpy(r.copy()), torch.from_numpy(c.copy())
    return x[..., r, c]
