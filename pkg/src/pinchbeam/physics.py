"""Physical model: geometry, LoS channel, pinching matrix, spectral efficiency.

Everything here is a pure function of its inputs (complex128 numpy under the
hood), usable as the reference path against which the differentiable pipeline
is checked. Antenna rows are stacked waveguide-major: row index = n*M + m for
waveguide n (0-based) and antenna m on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SystemConfig
from .errors import (ConstraintViolationError, InvalidConfigError,
                     SingularityError)

# Any user-antenna distance below this raises instead of clamping.
MIN_DISTANCE_M = 1e-6


@dataclass(frozen=True)
class ComplexMatrix:
    """Dense complex matrix stored as paired real row-major arrays."""

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = np.asarray(self.re, dtype=np.float64)
        im = np.asarray(self.im, dtype=np.float64)
        if re.shape != im.shape or re.ndim != 2:
            raise ValueError(f"re/im must be equal-shape 2-D arrays, got {re.shape} vs {im.shape}")
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    @property
    def rows(self) -> int:
        return self.re.shape[0]

    @property
    def cols(self) -> int:
        return self.re.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.re.shape

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "ComplexMatrix":
        z = np.asarray(z)
        return cls(np.ascontiguousarray(z.real, dtype=np.float64),
                   np.ascontiguousarray(z.imag, dtype=np.float64))


def as_complex(x) -> np.ndarray:
    """Coerce ComplexMatrix or array-like to a complex128 ndarray."""
    if isinstance(x, ComplexMatrix):
        return x.to_complex()
    return np.asarray(x, dtype=np.complex128)


@dataclass(frozen=True)
class UserPositions:
    """K user positions on the ground plane; third column identically zero."""

    positions: np.ndarray  # (K, 3) meters

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (K, 3), got {pos.shape}")
        if np.any(pos[:, 2] != 0.0):
            raise ValueError("user z-coordinates must be exactly 0")
        object.__setattr__(self, "positions", pos)

    @classmethod
    def from_xy(cls, xy: np.ndarray) -> "UserPositions":
        xy = np.asarray(xy, dtype=np.float64)
        pos = np.zeros((xy.shape[0], 3))
        pos[:, :2] = xy
        return cls(pos)

    @property
    def xy(self) -> np.ndarray:
        return self.positions[:, :2]

    @property
    def n_users(self) -> int:
        return self.positions.shape[0]


def sample_users(seed, config: SystemConfig) -> UserPositions:
    """K users i.i.d. uniform on the [0, D] x [0, D] square, z = 0.

    ``seed`` is anything numpy's default_rng accepts (int, SeedSequence, or a
    Generator, which is consumed).
    """
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0.0, config.D, size=(config.K, 2))
    return UserPositions.from_xy(xy)


@dataclass(frozen=True)
class AntennaLayout:
    """Per-waveguide first-antenna positions and inter-antenna gaps.

    Positions are derived by cumulative sums: x[n, m] = first_x[n] + sum of
    gaps[n, :m]. The feed point of waveguide n sits at (0, y_n, height).
    """

    first_x: np.ndarray      # (N,) meters
    gaps: np.ndarray         # (N, M-1) meters
    waveguide_y: np.ndarray  # (N,) meters
    height: float            # meters

    def __post_init__(self):
        fx = np.atleast_1d(np.asarray(self.first_x, dtype=np.float64))
        gaps = np.asarray(self.gaps, dtype=np.float64).reshape(fx.shape[0], -1)
        wy = np.atleast_1d(np.asarray(self.waveguide_y, dtype=np.float64))
        if wy.shape != fx.shape:
            raise ValueError("waveguide_y and first_x must have equal length")
        object.__setattr__(self, "first_x", fx)
        object.__setattr__(self, "gaps", gaps)
        object.__setattr__(self, "waveguide_y", wy)

    @property
    def n_waveguides(self) -> int:
        return self.first_x.shape[0]

    @property
    def n_per_waveguide(self) -> int:
        return self.gaps.shape[1] + 1

    def x_positions(self) -> np.ndarray:
        """(N, M) antenna x-coordinates."""
        n = self.n_waveguides
        offsets = np.concatenate([np.zeros((n, 1)), np.cumsum(self.gaps, axis=1)], axis=1)
        return self.first_x[:, None] + offsets

    def antenna_positions(self) -> np.ndarray:
        """(N, M, 3) positions of every pinching antenna."""
        x = self.x_positions()
        n, m = x.shape
        pos = np.empty((n, m, 3))
        pos[:, :, 0] = x
        pos[:, :, 1] = self.waveguide_y[:, None]
        pos[:, :, 2] = self.height
        return pos

    def feed_points(self) -> np.ndarray:
        """(N, 3) feed point of each waveguide, at x = 0."""
        n = self.n_waveguides
        pts = np.zeros((n, 3))
        pts[:, 1] = self.waveguide_y
        pts[:, 2] = self.height
        return pts


def layout_positions(config: SystemConfig, first_x: np.ndarray, gaps: np.ndarray,
                     waveguide_y: np.ndarray | None = None) -> AntennaLayout:
    """Validated layout from first-antenna positions and gaps.

    Raises ConstraintViolationError when a gap is below the minimum or any
    derived position leaves [0, D].
    """
    if waveguide_y is None:
        waveguide_y = config.waveguide_y()
    layout = AntennaLayout(first_x, gaps, waveguide_y, config.d)
    if layout.n_waveguides != config.N or layout.n_per_waveguide != config.M:
        raise InvalidConfigError(
            f"layout is {layout.n_waveguides}x{layout.n_per_waveguide}, "
            f"config wants {config.N}x{config.M}")
    if layout.gaps.size and np.min(layout.gaps) < config.min_gap_m:
        bad = np.argwhere(layout.gaps < config.min_gap_m)[0]
        raise ConstraintViolationError(
            f"gap {layout.gaps[tuple(bad)]:.6g} m below minimum {config.min_gap_m:.6g} m "
            f"at waveguide {bad[0]}, slot {bad[1] + 1}")
    x = layout.x_positions()
    if np.min(x) < 0.0 or np.max(x) > config.D:
        raise ConstraintViolationError(
            f"antenna x-positions must lie in [0, {config.D}], got "
            f"[{np.min(x):.6g}, {np.max(x):.6g}]")
    return layout


def compute_channel(users: UserPositions, layout: AntennaLayout,
                    wavelength: float, path_const: float) -> ComplexMatrix:
    """LoS channel H (M*N x K): entry = sqrt(eta) * exp(-j*2*pi*r/lambda) / r."""
    ant = layout.antenna_positions().reshape(-1, 3)          # (N*M, 3) waveguide-major
    diff = users.positions[None, :, :] - ant[:, None, :]     # (N*M, K, 3)
    r = np.linalg.norm(diff, axis=2)
    if np.min(r) < MIN_DISTANCE_M:
        a, k = np.unravel_index(np.argmin(r), r.shape)
        raise SingularityError(
            f"user {k} is {r[a, k]:.3g} m from antenna row {a}; below {MIN_DISTANCE_M} m")
    h = np.sqrt(path_const) * np.exp(-2j * np.pi * r / wavelength) / r
    return ComplexMatrix.from_complex(h)


def build_pinching_matrix(layout: AntennaLayout, guide_wavelength: float) -> ComplexMatrix:
    """Block-diagonal pinching matrix G (M*N x N).

    Block n holds the phase shifts exp(-j*2*pi*||feed - antenna||/lambda_g)
    of waveguide n, scaled by 1/sqrt(M) so each block has unit norm and
    ||G w|| = ||w||. Off-block entries are exact zeros.
    """
    n, m = layout.n_waveguides, layout.n_per_waveguide
    # Feed sits at x = 0 on the waveguide axis, so the travel distance is x.
    x = layout.x_positions()
    g = np.exp(-2j * np.pi * x / guide_wavelength) / np.sqrt(m)
    full = np.zeros((n * m, n), dtype=np.complex128)
    for i in range(n):
        full[i * m:(i + 1) * m, i] = g[i]
    return ComplexMatrix.from_complex(full)


def effective_channel(h, g) -> ComplexMatrix:
    """Effective channel H_tilde = G^H @ H (N x K), so h_k^H G w = h_tilde_k^H w."""
    hc = as_complex(h)
    gc = as_complex(g)
    if hc.shape[0] != gc.shape[0]:
        raise ValueError(f"row mismatch: H is {hc.shape}, G is {gc.shape}")
    return ComplexMatrix.from_complex(gc.conj().T @ hc)


def compute_se(h_tilde, w, noise_power: float) -> float | np.ndarray:
    """Sum spectral efficiency in bits/s/Hz.

    SE = sum_k log2(1 + |h_k^H w_k|^2 / (sum_{j != k} |h_k^H w_j|^2 + noise)).
    Accepts stacked inputs of shape (..., N, K); returns matching leading shape.
    """
    if noise_power <= 0:
        raise InvalidConfigError(f"noise power must be > 0, got {noise_power}")
    ht = as_complex(h_tilde) if isinstance(h_tilde, ComplexMatrix) else np.asarray(h_tilde, dtype=np.complex128)
    wc = as_complex(w) if isinstance(w, ComplexMatrix) else np.asarray(w, dtype=np.complex128)
    cross = np.swapaxes(ht, -1, -2).conj() @ wc              # (..., K, K), [k, j] = h_k^H w_j
    p = np.abs(cross) ** 2
    sig = np.diagonal(p, axis1=-2, axis2=-1)
    interf = p.sum(axis=-1) - sig + noise_power
    se = np.sum(np.log1p(sig / interf), axis=-1) / np.log(2.0)
    return float(se) if se.ndim == 0 else se


@dataclass(frozen=True)
class Violation:
    """One violated constraint; margin is the amount by which it is broken."""

    kind: str            # "gap_min" | "position_low" | "position_high" | "power"
    index: tuple | None  # (waveguide, slot) for geometry, None for power
    margin: float

    def __str__(self):
        where = f" at {self.index}" if self.index is not None else ""
        return f"{self.kind}{where}: margin {self.margin:.3e}"


# Relative tolerance on the power budget check.
POWER_RTOL = 1e-9


def check_feasibility(layout: AntennaLayout | None, w, config: SystemConfig) -> list[Violation]:
    """Every violated constraint of the placement/power problem; empty iff feasible.

    ``w`` may be None to check geometry only. Violations are data, not errors.
    """
    out: list[Violation] = []
    if layout is not None:
        for n in range(layout.n_waveguides):
            for i, gap in enumerate(layout.gaps[n]):
                if gap < config.min_gap_m:
                    out.append(Violation("gap_min", (n, i + 1), config.min_gap_m - gap))
        x = layout.x_positions()
        for n in range(x.shape[0]):
            for m in range(x.shape[1]):
                if x[n, m] < 0.0:
                    out.append(Violation("position_low", (n, m), -x[n, m]))
                elif x[n, m] > config.D:
                    out.append(Violation("position_high", (n, m), x[n, m] - config.D))
    if w is not None:
        power = float(np.sum(np.abs(as_complex(w)) ** 2))
        if power > config.power_budget_w * (1.0 + POWER_RTOL):
            out.append(Violation("power", None, power - config.power_budget_w))
    return out


def random_feasible_layout(rng: np.random.Generator, config: SystemConfig) -> AntennaLayout:
    """Uniformly random layout satisfying the gap and region constraints."""
    n, m = config.N, config.M
    slack = config.D - (m - 1) * config.min_gap_m
    # Keep expected spans well inside the region so first_x has room.
    gaps = config.min_gap_m + rng.uniform(0.0, slack / (m + 1), size=(n, max(m - 1, 0)))
    span = gaps.sum(axis=1)
    first_x = rng.uniform(0.0, config.D - span)
    return layout_positions(config, first_x, gaps)
