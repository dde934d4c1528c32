"""Heuristic baseline and brute-force searches used to ground the tests.

The baseline (single antenna per waveguide) places each antenna at the x-axis
position of the user closest to that waveguide and applies zero-forcing with
equal per-user power. The grid searches are deliberately guarded to desk
scale; they exist to estimate optima, not to run large systems.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SystemConfig
from .errors import (DegenerateInputError, InvalidConfigError,
                     OracleIneligibleError, RankDeficientError)
from .physics import (AntennaLayout, ComplexMatrix, UserPositions, as_complex,
                      build_pinching_matrix, compute_channel, compute_se,
                      effective_channel, layout_positions)
from .precoder_gnn import normalize_power_np

# Condition-number guard for the zero-forcing Gram matrix.
_RANK_RTOL = 1e-10


def zero_forcing(h_tilde, p_max: float) -> np.ndarray:
    """ZF precoder with equal per-user power and ||W||^2 = p_max.

    Directions follow H (H^H H)^{-1}; each column is normalized, then scaled
    by sqrt(p_max / K). Requires K <= N and full column rank.
    """
    ht = as_complex(h_tilde)
    n, k = ht.shape
    if k > n:
        raise RankDeficientError(f"zero-forcing needs K <= N, got K={k}, N={n}")
    sv = np.linalg.svd(ht, compute_uv=False)
    if sv[-1] <= _RANK_RTOL * sv[0]:
        raise RankDeficientError("effective channel is (numerically) rank deficient")
    gram = ht.conj().T @ ht
    w = ht @ np.linalg.solve(gram, np.eye(k, dtype=np.complex128))
    w = w / np.linalg.norm(w, axis=0, keepdims=True)
    return w * np.sqrt(p_max / k)


@dataclass(frozen=True)
class BaselineResult:
    layout: AntennaLayout
    w: np.ndarray        # (N, K) complex
    h_tilde: ComplexMatrix
    used_pinv: bool      # True when ZF fell back to a pseudo-inverse


def baseline_closest_user(users: UserPositions, cfg: SystemConfig) -> BaselineResult:
    """Closest-user placement + zero-forcing; defined for M = 1 only.

    "Closest" means closest to the waveguide axis (the line y = y_n, z = d);
    x does not enter since the antenna can slide along the guide. Ties break
    toward the lowest user index.
    """
    if cfg.M != 1:
        raise InvalidConfigError(f"baseline is defined for one antenna per waveguide, M={cfg.M}")
    wy = cfg.waveguide_y()
    # Squared distance of user k to waveguide n's axis: (y_k - y_n)^2 + d^2.
    dist2 = (users.positions[None, :, 1] - wy[:, None]) ** 2 + cfg.d ** 2
    chosen = np.argmin(dist2, axis=1)
    first_x = users.positions[chosen, 0]
    layout = layout_positions(cfg, first_x, np.zeros((cfg.N, 0)))
    h = compute_channel(users, layout, cfg.wavelength, cfg.path_const)
    g = build_pinching_matrix(layout, cfg.guide_wavelength)
    ht = effective_channel(h, g)
    used_pinv = False
    try:
        w = zero_forcing(ht, cfg.power_budget_w)
    except RankDeficientError:
        w = np.linalg.pinv(ht.to_complex().conj().T)
        norms = np.linalg.norm(w, axis=0, keepdims=True)
        if np.any(norms == 0.0):
            raise DegenerateInputError("pseudo-inverse produced a zero column")
        w = w / norms * np.sqrt(cfg.power_budget_w / cfg.K)
        used_pinv = True
    return BaselineResult(layout, w, ht, used_pinv)


def baseline_se(users: UserPositions, cfg: SystemConfig) -> float:
    res = baseline_closest_user(users, cfg)
    return float(compute_se(res.h_tilde, res.w, cfg.noise_power_w))


# ---------------------------------------------------------------------------
# brute-force searches


@dataclass(frozen=True)
class OracleResult:
    best_se: float
    layout: AntennaLayout
    w: np.ndarray
    grid_n: int


def structure_power_sweep(h_tilde, p_max: float, noise_power: float,
                          n_grid: int = 50) -> tuple[float, np.ndarray]:
    """Best SE reachable through the optimal-structure parameterization.

    Sweeps a dense grid over (p_1 / p_max, lam_1, lam_2) for K = 2 (for K = 1
    the matched filter at full power is returned directly), recovers each
    candidate precoder and normalizes it to the power budget. Returns
    (best SE, best precoder).
    """
    ht = as_complex(h_tilde)
    n, k = ht.shape
    if k == 1:
        w = np.sqrt(p_max) * ht / np.linalg.norm(ht)
        return float(compute_se(ht, w, noise_power)), w
    if k != 2:
        raise OracleIneligibleError(f"power sweep supports K <= 2, got K={k}")
    hth = ht.conj().T @ ht                                   # (2, 2)
    lam = np.linspace(0.0, p_max, n_grid)
    l1 = lam[:, None, None, None]
    l2 = lam[None, :, None, None]
    # A = diag(lam) @ hth + noise * I, assembled entrywise over the lam grid.
    a00 = l1 * hth[0, 0] + noise_power
    a01 = l1 * hth[0, 1]
    a10 = l2 * hth[1, 0]
    a11 = l2 * hth[1, 1] + noise_power
    det = a00 * a11 - a01 * a10
    p1 = np.linspace(0.0, 1.0, n_grid)[None, None, :, None] * p_max
    s1 = np.sqrt(p1)
    s2 = np.sqrt(p_max - p1)
    # Columns of X = A^{-1} diag(sqrt(p)) via the closed-form 2x2 inverse.
    x = np.empty((n_grid, n_grid, n_grid, 2, 2), dtype=np.complex128)
    x[..., 0, 0] = (a11 * s1 / det)[..., 0]
    x[..., 1, 0] = (-a10 * s1 / det)[..., 0]
    x[..., 0, 1] = (-a01 * s2 / det)[..., 0]
    x[..., 1, 1] = (a00 * s2 / det)[..., 0]
    w = ht @ x                                               # (g, g, g, N, 2)
    w = normalize_power_np(w, p_max)
    se = compute_se(np.broadcast_to(ht, w.shape[:-2] + ht.shape), w, noise_power)
    flat = int(np.argmax(se))
    idx = np.unravel_index(flat, se.shape)
    return float(se[idx]), w[idx]


def random_precoder_search(h_tilde, p_max: float, noise_power: float,
                           n_draws: int, seed: int) -> float:
    """Best SE over random precoders drawn on the power sphere ||W||^2 = p_max."""
    ht = as_complex(h_tilde)
    n, k = ht.shape
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((n_draws, n, k)) + 1j * rng.standard_normal((n_draws, n, k))
    w = normalize_power_np(w, p_max)
    se = compute_se(np.broadcast_to(ht, w.shape), w, noise_power)
    return float(np.max(se))


def _channel_row(x: np.ndarray, user_xy: np.ndarray, wy: float,
                 cfg: SystemConfig) -> np.ndarray:
    """Effective channel of a single-antenna waveguide at x, for all users.

    Returns (len(x), K) complex: conj(g) * h with the M = 1 pinching phase.
    """
    r = np.sqrt((x[:, None] - user_xy[None, :, 0]) ** 2
                + (wy - user_xy[None, :, 1]) ** 2 + cfg.d ** 2)
    h = np.sqrt(cfg.path_const) * np.exp(-2j * np.pi * r / cfg.wavelength) / r
    g_conj = np.exp(2j * np.pi * x / cfg.guide_wavelength)
    return g_conj[:, None] * h


def grid_search_oracle(users: UserPositions, cfg: SystemConfig, grid_n: int = 1000,
                       power_grid_n: int = 50) -> OracleResult:
    """Exhaustive placement grid, guarded to M = 1 and K * N <= 2.

    K = 1: the matched filter at full power is optimal, so the search reduces
    to maximizing sum_n eta / r_n^2 independently per waveguide. K = 2 (one
    waveguide): each grid position is swept through the structure power grid.
    """
    if cfg.M != 1 or cfg.K * cfg.N > 2:
        raise OracleIneligibleError(
            f"grid search requires M = 1 and K * N <= 2, got M={cfg.M}, "
            f"K={cfg.K}, N={cfg.N}")
    grid = np.linspace(0.0, cfg.D, grid_n)
    wy = cfg.waveguide_y()
    p_max, noise = cfg.power_budget_w, cfg.noise_power_w

    if cfg.K == 1:
        # SE = log2(1 + P * sum_n eta/r_n^2 / noise): waveguides separate.
        first_x = np.empty(cfg.N)
        for n in range(cfg.N):
            r2 = ((grid - users.positions[0, 0]) ** 2
                  + (wy[n] - users.positions[0, 1]) ** 2 + cfg.d ** 2)
            first_x[n] = grid[int(np.argmin(r2))]
        layout = layout_positions(cfg, first_x, np.zeros((cfg.N, 0)))
        h = compute_channel(users, layout, cfg.wavelength, cfg.path_const)
        g = build_pinching_matrix(layout, cfg.guide_wavelength)
        ht = effective_channel(h, g).to_complex()
        w = np.sqrt(p_max) * ht / np.linalg.norm(ht)
        return OracleResult(float(compute_se(ht, w, noise)), layout, w, grid_n)

    # K = 2, N = 1.
    rows = _channel_row(grid, users.positions[:, :2], wy[0], cfg)
    best = (-np.inf, 0, None)
    for i in range(grid_n):
        ht = rows[i][None, :]                                # (1, 2)
        se, w = structure_power_sweep(ht, p_max, noise, power_grid_n)
        if se > best[0]:
            best = (se, i, w)
    layout = layout_positions(cfg, np.array([grid[best[1]]]), np.zeros((1, 0)))
    return OracleResult(best[0], layout, best[2], grid_n)
