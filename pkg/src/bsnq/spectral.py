"""Periodic-torus fields in Fourier representation and the spectral operators on them.

Conventions, used everywhere in the package:

* the domain is [0, L]^2 with L = 2*pi by default, sampled on a K x K grid;
* a field is stored by its Fourier amplitudes f_hat(k) such that
  f(x) = sum_k f_hat(k) exp(i k.x), with k = (2*pi/L) * j for integer
  indices j in {-K/2+1, ..., K/2} per dimension (numpy fft layout);
* Parseval therefore reads ||f||_{L2}^2 = L^2 * sum_k |f_hat(k)|^2;
* the Nyquist row/column (|j| = K/2) is zeroed on every transform, since it
  has no Hermitian partner on an even grid.

All operations are pure: fields are values, never mutated in place.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import cached_property, lru_cache
from math import pi

import numpy as np
import scipy.fft as _fft

__all__ = [
    "TorusGrid",
    "SpectralScalarField",
    "SpectralVectorField",
    "Operator",
    "to_spectral",
    "to_physical",
    "vector_to_spectral",
    "vector_to_physical",
    "leray_project",
    "apply_fractional_power",
    "resolvent",
    "apply_operator",
    "sobolev_norm",
    "inner_product",
    "l4_norm",
    "hermitian_defect",
    "divergence_defect",
    "random_scalar_field",
    "random_vector_field",
    "gagliardo_nirenberg_constant",
]


@dataclass(frozen=True)
class TorusGrid:
    """Periodic lattice on [0, L]^2 with K modes per dimension."""

    K: int
    L: float = 2.0 * pi
    dealias_cutoff: int | None = None

    def __post_init__(self):
        if self.K < 4 or self.K % 2 != 0:
            raise ValueError(f"K must be even and >= 4, got {self.K}")
        if self.L <= 0:
            raise ValueError(f"L must be positive, got {self.L}")
        if self.dealias_cutoff is None:
            object.__setattr__(self, "dealias_cutoff", self.K // 3)
        if not 1 <= self.dealias_cutoff <= self.K // 2 - 1:
            raise ValueError(
                f"dealias_cutoff must lie in [1, K/2-1], got {self.dealias_cutoff}"
            )

    @cached_property
    def index(self) -> np.ndarray:
        """Integer mode indices in fft order; the K/2 slot is the Nyquist mode."""
        return np.fft.fftfreq(self.K, d=1.0 / self.K).astype(np.int64)

    @cached_property
    def jx(self) -> np.ndarray:
        return self.index[:, None] * np.ones(self.K, dtype=np.int64)[None, :]

    @cached_property
    def jy(self) -> np.ndarray:
        return np.ones(self.K, dtype=np.int64)[:, None] * self.index[None, :]

    @cached_property
    def kx(self) -> np.ndarray:
        return (2.0 * pi / self.L) * self.jx

    @cached_property
    def ky(self) -> np.ndarray:
        return (2.0 * pi / self.L) * self.jy

    @cached_property
    def k_sq(self) -> np.ndarray:
        """Physical |k|^2; eigenvalue of the Stokes operator / minus Laplacian."""
        return self.kx**2 + self.ky**2

    @cached_property
    def nyquist_mask(self) -> np.ndarray:
        half = self.K // 2
        return (np.abs(self.jx) == half) | (np.abs(self.jy) == half)

    @cached_property
    def dealias_keep(self) -> np.ndarray:
        c = self.dealias_cutoff
        return (np.abs(self.jx) <= c) & (np.abs(self.jy) <= c)

    @cached_property
    def band_mask(self) -> np.ndarray:
        """1.0 inside the dealias band (Nyquist excluded), 0.0 outside."""
        return (self.dealias_keep & ~self.nyquist_mask).astype(float)

    @cached_property
    def inv_k_sq(self) -> np.ndarray:
        """1/|k|^2 with the k=0 entry set to 0."""
        out = np.zeros_like(self.k_sq)
        nz = self.k_sq > 0
        out[nz] = 1.0 / self.k_sq[nz]
        return out

    def physical_mesh(self):
        x = np.arange(self.K) * (self.L / self.K)
        return np.meshgrid(x, x, indexing="ij")

    def wavenumber(self, j1: int, j2: int) -> tuple[float, float]:
        return (2.0 * pi / self.L) * j1, (2.0 * pi / self.L) * j2


class Operator(Enum):
    """Which dissipative operator a spectral multiplier refers to.

    Both have Fourier multiplier |k|^2; STOKES acts on divergence-free vector
    fields (the Leray projection is built into their representation),
    LAPLACIAN acts on scalars.
    """

    STOKES = "stokes"
    LAPLACIAN = "laplacian"


@dataclass(frozen=True)
class SpectralScalarField:
    grid: TorusGrid
    coeffs: np.ndarray  # complex, shape (K, K)

    def __post_init__(self):
        if self.coeffs.shape != (self.grid.K, self.grid.K):
            raise ValueError(
                f"coefficient shape {self.coeffs.shape} does not match grid K={self.grid.K}"
            )

    def copy(self) -> "SpectralScalarField":
        return SpectralScalarField(self.grid, self.coeffs.copy())

    def __add__(self, other):
        _check_same_grid(self, other)
        return SpectralScalarField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other):
        _check_same_grid(self, other)
        return SpectralScalarField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, a: float):
        return SpectralScalarField(self.grid, self.coeffs * a)

    __rmul__ = __mul__


@dataclass(frozen=True)
class SpectralVectorField:
    grid: TorusGrid
    coeffs: np.ndarray  # complex, shape (2, K, K): components (u1, u2)

    def __post_init__(self):
        if self.coeffs.shape != (2, self.grid.K, self.grid.K):
            raise ValueError(
                f"coefficient shape {self.coeffs.shape} does not match grid K={self.grid.K}"
            )

    def copy(self) -> "SpectralVectorField":
        return SpectralVectorField(self.grid, self.coeffs.copy())

    def __add__(self, other):
        _check_same_grid(self, other)
        return SpectralVectorField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other):
        _check_same_grid(self, other)
        return SpectralVectorField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, a: float):
        return SpectralVectorField(self.grid, self.coeffs * a)

    __rmul__ = __mul__


Field = SpectralScalarField | SpectralVectorField


def _check_same_grid(f, g):
    if f.grid != g.grid:
        raise ValueError("fields live on different grids")


def _like(f: Field, coeffs: np.ndarray) -> Field:
    return type(f)(f.grid, coeffs)


def _zero_nyquist(grid: TorusGrid, coeffs: np.ndarray) -> np.ndarray:
    out = coeffs.copy()
    out[..., grid.nyquist_mask] = 0.0
    return out


def to_spectral(samples: np.ndarray, grid: TorusGrid) -> SpectralScalarField:
    """Forward transform of real point samples on the K x K physical grid.

    The Nyquist modes are zeroed, so the round trip is exact only for fields
    without Nyquist content (all band-limited fields in this package).
    """
    samples = np.asarray(samples)
    if samples.shape != (grid.K, grid.K):
        raise ValueError(f"sample shape {samples.shape} does not match grid K={grid.K}")
    if np.iscomplexobj(samples):
        raise ValueError("physical samples must be real")
    coeffs = _fft.fft2(samples) / grid.K**2
    return SpectralScalarField(grid, _zero_nyquist(grid, coeffs))


def to_physical(f: SpectralScalarField) -> np.ndarray:
    return np.real(_fft.ifft2(f.coeffs) * f.grid.K**2)


def vector_to_spectral(samples: np.ndarray, grid: TorusGrid) -> SpectralVectorField:
    samples = np.asarray(samples)
    if samples.shape != (2, grid.K, grid.K):
        raise ValueError(f"sample shape {samples.shape} does not match grid K={grid.K}")
    if np.iscomplexobj(samples):
        raise ValueError("physical samples must be real")
    coeffs = _fft.fft2(samples, axes=(-2, -1)) / grid.K**2
    return SpectralVectorField(grid, _zero_nyquist(grid, coeffs))


def vector_to_physical(u: SpectralVectorField) -> np.ndarray:
    return np.real(_fft.ifft2(u.coeffs, axes=(-2, -1)) * u.grid.K**2)


def leray_project(f: SpectralVectorField) -> SpectralVectorField:
    """Project onto divergence-free fields: f_hat - (k.f_hat) k / |k|^2 for k != 0.

    The k = 0 mode passes through unchanged (no constraint on the mean).
    """
    g = f.grid
    kdotf = (g.kx * f.coeffs[0] + g.ky * f.coeffs[1]) * g.inv_k_sq
    out = np.empty_like(f.coeffs)
    out[0] = f.coeffs[0] - kdotf * g.kx
    out[1] = f.coeffs[1] - kdotf * g.ky
    out[:, 0, 0] = f.coeffs[:, 0, 0]
    return SpectralVectorField(g, out)


def _validate_operator(f: Field, op: Operator | None):
    if op is None:
        return
    if op is Operator.STOKES and not isinstance(f, SpectralVectorField):
        raise TypeError("the Stokes operator acts on vector fields")
    if op is Operator.LAPLACIAN and not isinstance(f, SpectralScalarField):
        raise TypeError("the scalar Laplacian acts on scalar fields")


def apply_fractional_power(f: Field, s: float, op: Operator | None = None) -> Field:
    """Multiply mode k by |k|^(2s); k=0 is zeroed for s > 0, kept for s = 0.

    Negative powers reject fields with a nonzero mean (unbounded inverse on
    constants); for mean-zero input the k=0 output is 0.
    """
    _validate_operator(f, op)
    if s == 0:
        return _like(f, f.coeffs.copy())
    g = f.grid
    if s < 0:
        mean_amp = np.max(np.abs(f.coeffs[..., 0, 0]))
        scale = np.max(np.abs(f.coeffs)) if f.coeffs.size else 0.0
        if mean_amp > 1e-13 * max(scale, 1e-300):
            raise ValueError("unbounded inverse on constants: field has nonzero mean")
    mult = np.zeros_like(g.k_sq)
    nz = g.k_sq > 0
    mult[nz] = g.k_sq[nz] ** s
    return _like(f, f.coeffs * mult)


@lru_cache(maxsize=64)
def _resolvent_multiplier(grid: TorusGrid, lam: float) -> np.ndarray:
    return 1.0 / (1.0 + lam * grid.k_sq)


def resolvent(f: Field, lam: float, op: Operator | None = None) -> Field:
    """(I + lam*A)^(-1) f, i.e. divide mode k by 1 + lam*|k|^2 (divisor 1 at k=0)."""
    _validate_operator(f, op)
    if lam <= 0:
        raise ValueError(f"resolvent parameter must be positive, got {lam}")
    return _like(f, f.coeffs * _resolvent_multiplier(f.grid, float(lam)))


def apply_operator(f: Field, op: Operator | None = None) -> Field:
    """A f (or the scalar Laplacian): multiply mode k by |k|^2."""
    _validate_operator(f, op)
    return _like(f, f.coeffs * f.grid.k_sq)


@lru_cache(maxsize=64)
def _norm_weights(grid: TorusGrid, s: float) -> np.ndarray:
    w = np.zeros_like(grid.k_sq)
    nz = grid.k_sq > 0
    w[nz] = grid.k_sq[nz] ** s
    return w


def sobolev_norm(f: Field, s: float = 0.0) -> float:
    """Spectral Sobolev (semi)norm: norm^2 = L^2 * sum_{k!=0} |k|^{2s} |f_hat|^2.

    For s = 0 the k=0 term is included, so this is the plain L^2 norm.
    """
    c2 = np.abs(f.coeffs) ** 2
    if c2.ndim == 3:
        c2 = c2.sum(axis=0)
    g = f.grid
    if s == 0:
        total = c2.sum()
    else:
        total = (_norm_weights(g, float(s)) * c2).sum()
    return g.L * float(np.sqrt(total))


def inner_product(f: Field, g_field: Field) -> float:
    """Real L^2 pairing; components are summed for vector fields."""
    _check_same_grid(f, g_field)
    if type(f) is not type(g_field):
        raise TypeError("inner product requires fields of the same kind")
    return f.grid.L**2 * float(np.real(np.sum(f.coeffs * np.conj(g_field.coeffs))))


def _pad_coeffs(coeffs: np.ndarray, K: int, K_pad: int) -> np.ndarray:
    """Re-slot fft-ordered coefficients of size K into a K_pad grid (K_pad > K)."""
    shape = coeffs.shape[:-2] + (K_pad, K_pad)
    out = np.zeros(shape, dtype=complex)
    idx = np.fft.fftfreq(K, d=1.0 / K).astype(np.int64)
    slots = idx % K_pad
    out[..., slots[:, None], slots[None, :]] = coeffs
    return out


def l4_norm(f: Field) -> float:
    """Exact L^4 norm of a band-limited field via a 2x zero-padded grid.

    The integrand has bandwidth at most 4*(K/2) < 2K, so the padded
    quadrature sum is exact.
    """
    g = f.grid
    K_pad = 2 * g.K
    padded = _pad_coeffs(f.coeffs, g.K, K_pad)
    phys = np.real(_fft.ifft2(padded, axes=(-2, -1)) * K_pad**2)
    if phys.ndim == 3:
        mag2 = phys[0] ** 2 + phys[1] ** 2
    else:
        mag2 = phys**2
    integral = np.sum(mag2**2) * (g.L / K_pad) ** 2
    return float(integral ** 0.25)


def _reflect(coeffs: np.ndarray) -> np.ndarray:
    """Map coefficient at mode k to the slot of mode -k (fft index layout)."""
    return np.roll(coeffs[..., ::-1, ::-1], shift=(1, 1), axis=(-2, -1))


def hermitian_defect(f: Field) -> float:
    """Max |f_hat(k) - conj(f_hat(-k))|; zero for real-valued fields."""
    return float(np.max(np.abs(f.coeffs - np.conj(_reflect(f.coeffs)))))


def divergence_defect(u: SpectralVectorField) -> float:
    """Relative spectral divergence: ||k.u_hat|| / ||(|k|) u_hat|| (0 for zero fields)."""
    g = u.grid
    div = g.kx * u.coeffs[0] + g.ky * u.coeffs[1]
    num = np.sqrt(np.sum(np.abs(div) ** 2))
    den = np.sqrt(np.sum(g.k_sq * (np.abs(u.coeffs) ** 2).sum(axis=0)))
    if den == 0.0:
        return 0.0
    return float(num / den)


def _random_band_coeffs(grid: TorusGrid, rng: np.random.Generator, kmax: int,
                        decay: float) -> np.ndarray:
    c = rng.standard_normal((grid.K, grid.K)) + 1j * rng.standard_normal((grid.K, grid.K))
    keep = (np.abs(grid.jx) <= kmax) & (np.abs(grid.jy) <= kmax) & ~grid.nyquist_mask
    c[~keep] = 0.0
    if decay != 0.0:
        c *= (1.0 + grid.k_sq) ** (-decay / 2.0)
    c = 0.5 * (c + np.conj(_reflect(c)))
    return c


def random_scalar_field(grid: TorusGrid, rng: np.random.Generator,
                        kmax: int | None = None, decay: float = 0.0,
                        mean_zero: bool = True) -> SpectralScalarField:
    """Random real band-limited field (Hermitian by construction)."""
    kmax = grid.dealias_cutoff if kmax is None else kmax
    c = _random_band_coeffs(grid, rng, kmax, decay)
    if mean_zero:
        c[0, 0] = 0.0
    return SpectralScalarField(grid, c)


def random_vector_field(grid: TorusGrid, rng: np.random.Generator,
                        kmax: int | None = None, decay: float = 0.0,
                        mean_zero: bool = True,
                        divergence_free: bool = True) -> SpectralVectorField:
    kmax = grid.dealias_cutoff if kmax is None else kmax
    c = np.stack([_random_band_coeffs(grid, rng, kmax, decay) for _ in range(2)])
    if mean_zero:
        c[:, 0, 0] = 0.0
    u = SpectralVectorField(grid, c)
    return leray_project(u) if divergence_free else u


def gagliardo_nirenberg_constant(grid: TorusGrid, n_samples: int = 1000,
                                 seed: int = 0) -> tuple[float, np.ndarray]:
    """Empirical C such that ||u||_{L4} <= C ||A^(1/2)u||^(1/2) ||u||^(1/2).

    Returns (recorded max ratio, all sampled ratios) over random mean-zero
    divergence-free band-limited fields. No analytic torus value is assumed.
    """
    rng = np.random.default_rng(seed)
    ratios = np.empty(n_samples)
    for i in range(n_samples):
        u = random_vector_field(grid, rng, decay=rng.uniform(0.0, 2.0))
        l4 = l4_norm(u)
        denom = np.sqrt(sobolev_norm(u, 1.0) * sobolev_norm(u, 0.0))
        ratios[i] = l4 / denom if denom > 0 else 0.0
    return float(ratios.max()), ratios
