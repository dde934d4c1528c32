"""Placement sub-GNN: user positions -> feasible antenna layout.

Edge-update network over (antenna slot, user) pairs. Each layer combines a
per-user message pass (the processor sees both endpoints, reflecting
inter-user interference) with update functions that are equivariant to
nested permutations: waveguides may be reordered, and antenna slots within a
waveguide may be reordered together with their index features.

Tensors carry shape (B, N, M, K, width): batch, waveguides, antenna slots per
waveguide, users, features. Constraints (minimum gap, region bounds) hold by
construction of the output stage, not by penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import FnnSpec, ParameterStore, Tape, Var, fnn_forward, init_fnn
from .config import ModelConfig, SystemConfig
from .errors import InvalidConfigError

# f is composed of (ff, qf1, qf2); the processor q of (fq, qq1, qq2).
SUBNET_NAMES = ("ff", "qf1", "qf2", "fq", "qq1", "qq2")

# Keeps the sigmoid placement fraction strictly inside (0, 1) so that derived
# positions stay inside [0, D] even after float rounding of the prefix sums.
_FRAC_EPS = 1e-9

# Temperature on the placement head. The SE carries phase terms that
# oscillate on the guide-wavelength scale of the antenna positions; early in
# training their gradients dominate the smooth path-loss signal and can walk
# the sigmoid into saturation before the power allocation settles (after
# which the placement landscape is phase-benign). Dividing the head output
# slows that subsystem without changing what it can express.
X1_TEMPERATURE = 8.0

# Fraction of the region length reserved by the span projection.
SPAN_MARGIN_FRACTION = 1e-3


def index_feature(n_waveguides: int, n_per_wg: int) -> np.ndarray:
    """(N, M) slot indices, 1..M on every waveguide."""
    return np.tile(np.arange(1, n_per_wg + 1, dtype=np.float64), (n_waveguides, 1))


def init_edges(tape: Tape, phi: np.ndarray, s: np.ndarray, cfg: SystemConfig) -> Var:
    """First-layer edge features [x_k/D, y_k/D, s/M], shape (B, N, M, K, 3).

    The user z-coordinate is identically zero and is dropped.
    """
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim == 2:
        phi = phi[None]
    b, k, _ = phi.shape
    n, m = s.shape
    feats = np.empty((b, n, m, k, 3))
    feats[..., 0] = phi[:, None, None, :, 0] / cfg.D
    feats[..., 1] = phi[:, None, None, :, 1] / cfg.D
    feats[..., 2] = (np.asarray(s, dtype=np.float64) / cfg.M)[None, :, :, None]
    return tape.constant(feats)


def layer_specs(in_width: int, model: ModelConfig) -> dict[str, FnnSpec]:
    """Subnet widths for one layer whose edge input width is ``in_width``."""
    h, md, act = model.hidden, model.message_dim, model.activation
    pair = 2 * in_width
    comb = in_width + md
    return {
        "qq1": FnnSpec((pair, h, md), act),
        "qq2": FnnSpec((pair, h, md), act),
        "fq": FnnSpec((pair + 2 * md, h, md), act),
        "qf1": FnnSpec((comb, h, md), act),
        "qf2": FnnSpec((comb, h, md), act),
        "ff": FnnSpec((comb + 2 * md, h, h), act),
    }


HEAD_NAMES = ("gap", "x1")


def head_spec(model: ModelConfig) -> FnnSpec:
    return FnnSpec((model.hidden, 1))


def init_params(store: ParameterStore, cfg: SystemConfig, model: ModelConfig,
                rng: np.random.Generator) -> None:
    width = 3
    for layer in range(1, model.pbf_layers + 1):
        specs = layer_specs(width, model)
        for name in SUBNET_NAMES:
            init_fnn(store, f"pbf.layer{layer}.{name}", specs[name], rng)
        width = model.hidden
    for name in HEAD_NAMES:
        init_fnn(store, f"pbf.head.{name}", head_spec(model), rng)


def nested_pe_map(tape: Tape, z: Var, store: ParameterStore, prefix: str,
                  names: tuple[str, str, str], specs: dict[str, FnnSpec]) -> Var:
    """Row map equivariant to nested (waveguide, within-waveguide) permutations.

    ``z`` has shape (..., N, M, R, d); R is a free replication axis. Output
    row (n, m) is main([z_nm, sum_{i != m} same(z_ni), sum_{j != n} sum_i
    other(z_ji)]); empty index sets contribute exact zeros.
    """
    main_name, same_name, other_name = names
    a = fnn_forward(tape, specs[same_name], store, f"{prefix}.{same_name}", z)
    same_sum = ad.sub(ad.sum_axis(a, -3, keepdims=True), a)
    b = fnn_forward(tape, specs[other_name], store, f"{prefix}.{other_name}", z)
    per_wg = ad.sum_axis(b, -3, keepdims=True)
    total = ad.sum_axis(per_wg, -4, keepdims=True)
    other_sum = ad.sub(total, per_wg)
    target = list(other_sum.shape)
    target[-4], target[-3] = z.shape[-4], z.shape[-3]
    other_b = ad.broadcast_to(other_sum, tuple(target))
    return fnn_forward(tape, specs[main_name], store, f"{prefix}.{main_name}",
                       ad.concat([z, same_sum, other_b], axis=-1))


def pbf_layer(tape: Tape, d: Var, store: ParameterStore, prefix: str,
              in_width: int, model: ModelConfig) -> Var:
    """One edge-update layer: d (B, N, M, K, w) -> (B, N, M, K, hidden)."""
    specs = layer_specs(in_width, model)
    bsz, n, m, k, w = d.shape
    dk = ad.broadcast_to(ad.reshape(d, (bsz, n, m, k, 1, w)), (bsz, n, m, k, k, w))
    dj = ad.broadcast_to(ad.reshape(d, (bsz, n, m, 1, k, w)), (bsz, n, m, k, k, w))
    pair = ad.reshape(ad.concat([dk, dj], axis=-1), (bsz, n, m, k * k, 2 * w))
    q_out = nested_pe_map(tape, pair, store, prefix, ("fq", "qq1", "qq2"), specs)
    q_out = ad.reshape(q_out, (bsz, n, m, k, k, model.message_dim))
    # Message for user k sums q(d_k, d_j) over j != k: total minus diagonal.
    eye = tape.constant(np.eye(k)[None, None, None, :, :, None])
    diag = ad.sum_axis(ad.mul(q_out, eye), 4)
    msg = ad.sub(ad.sum_axis(q_out, 4), diag)
    f_in = ad.concat([d, msg], axis=-1)
    return nested_pe_map(tape, f_in, store, prefix, ("ff", "qf1", "qf2"), specs)


def _edge_stack(tape: Tape, phi: np.ndarray, s: np.ndarray, store: ParameterStore,
                cfg: SystemConfig, model: ModelConfig) -> Var:
    d = init_edges(tape, phi, s, cfg)
    width = 3
    for layer in range(1, model.pbf_layers + 1):
        d = pbf_layer(tape, d, store, f"pbf.layer{layer}", width, model)
        width = model.hidden
    return d


def output_actions(tape: Tape, d_last: Var, store: ParameterStore,
                   cfg: SystemConfig, model: ModelConfig, s: np.ndarray) -> tuple[Var, Var]:
    """Heads + feasibility stage: final edge states -> per-slot actions.

    Returns (first_x (B, N), gap_slots (B, N, M)). The gap of slot (n, m) is
    max(mean over users of the gap head, 0) + min_gap; slot gaps whose index
    feature is >= 2 form the waveguide span. Spans exceeding the region budget
    are shrunk uniformly toward min_gap (largest feasible factor), and the
    first-antenna position takes a sigmoid fraction of the remaining room, so
    every emitted layout is feasible by construction.
    """
    spec = head_spec(model)
    gap_edge = fnn_forward(tape, spec, store, "pbf.head.gap", d_last)
    gap_mean = ad.mean_axis(ad.reshape(gap_edge, d_last.shape[:-1]), -1)
    gap_slots = ad.add(ad.max_with_scalar(gap_mean, 0.0), cfg.min_gap_m)

    x1_edge = fnn_forward(tape, spec, store, "pbf.head.x1", d_last)
    x1_units = ad.mean_axis(ad.reshape(x1_edge, d_last.shape[:-1]), (-2, -1))

    n_gaps = cfg.M - 1
    margin = SPAN_MARGIN_FRACTION * cfg.D
    cap = (cfg.D - margin) - n_gaps * cfg.min_gap_m
    if cap <= 0:
        raise InvalidConfigError(
            f"(M-1)*min_gap = {n_gaps * cfg.min_gap_m:.4g} m leaves no placement room")
    mask = tape.constant((np.asarray(s, dtype=np.float64) >= 2.0).astype(np.float64))
    excess = ad.sub(ad.sum_axis(ad.mul(gap_slots, mask), -1), n_gaps * cfg.min_gap_m)
    rho = ad.div(cap, ad.max_with_scalar(excess, cap))
    rho = ad.reshape(rho, rho.shape + (1,))
    gap_slots = ad.add(ad.mul(rho, ad.sub(gap_slots, cfg.min_gap_m)), cfg.min_gap_m)
    span = ad.sum_axis(ad.mul(gap_slots, mask), -1)

    frac = ad.add(ad.scalar_scale(
        ad.sigmoid(ad.scalar_scale(x1_units, 1.0 / X1_TEMPERATURE)),
        1.0 - 2.0 * _FRAC_EPS), _FRAC_EPS)
    first_x = ad.mul(frac, ad.sub(cfg.D, span))
    return first_x, gap_slots


def pbf_actions(tape: Tape, phi: np.ndarray, s: np.ndarray, store: ParameterStore,
                cfg: SystemConfig, model: ModelConfig) -> tuple[Var, Var]:
    """Full action map (phi, s) -> (first_x, per-slot gaps).

    This is the surface on which the permutation property is stated: permuting
    users leaves the actions unchanged, permuting waveguide blocks (and their
    index features) permutes actions identically, and permuting index features
    within a waveguide permutes that waveguide's gap slots.
    """
    d = _edge_stack(tape, phi, s, store, cfg, model)
    return output_actions(tape, d, store, cfg, model, s)


@dataclass(frozen=True)
class PbfOut:
    """Differentiable layout: handles stay on the tape."""

    first_x: Var     # (B, N)
    gaps: Var        # (B, N, M-1)
    positions_x: Var  # (B, N, M)


def pbf_forward(tape: Tape, phi: np.ndarray, store: ParameterStore,
                cfg: SystemConfig, model: ModelConfig) -> PbfOut:
    """Layout in canonical slot order (index feature 1..M per waveguide)."""
    s = index_feature(cfg.N, cfg.M)
    first_x, gap_slots = pbf_actions(tape, phi, s, store, cfg, model)
    gaps = ad.slice_axis(gap_slots, -1, 1, cfg.M)
    if cfg.M > 1:
        csum = ad.matmul(gaps, tape.constant(np.triu(np.ones((cfg.M - 1, cfg.M - 1)))))
        zeros = tape.constant(np.zeros(gaps.shape[:-1] + (1,)))
        offsets = ad.concat([zeros, csum], axis=-1)
    else:
        offsets = tape.constant(np.zeros(first_x.shape + (1,)))
    positions_x = ad.add(ad.reshape(first_x, first_x.shape + (1,)), offsets)
    return PbfOut(first_x, gaps, positions_x)
