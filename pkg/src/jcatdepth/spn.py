"""Non-local spatial propagation refinement.

One step replaces every depth by an affine combination of itself and J
neighbours: ``d'(u,v) = w00(u,v) d(u,v) + sum_j w_j(u,v) d(n_j(u,v))`` with
``w00 = 1 - sum_j w_j``. Neighbour positions are a fixed ring plus learned
continuous offsets (``nonlocal``) or just the integer ring (``fixed_local``).
Off-image neighbours read zero.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .config import SPN_MODES
from .tensor import ConfigError, ShapeError, Tensor


@dataclass(frozen=True)
class SpnConfig:
    iterations: int = 6
    neighbors: int = 8
    mode: str = "nonlocal"

    def __post_init__(self):
        if self.iterations < 0 or self.neighbors < 1:
            raise ConfigError("SPN needs iterations >= 0 and neighbors >= 1")
        if self.mode not in SPN_MODES:
            raise ConfigError(f"SPN mode must be one of {SPN_MODES}")


@dataclass
class SpnState:
    depth: Tensor        # B,1,H,W
    w: Tensor            # B,J,H,W normalised neighbour weights
    w00: Tensor          # B,1,H,W self weight
    offsets: Tensor | None  # B,2J,H,W (row, col) pairs per neighbour
    confidence: Tensor   # B,1,H,W
    mode: str = "nonlocal"
    step: int = 0
    # neighbour positions and their sampling plan, shared by all steps
    coords: Tensor | None = None
    plan: T.BilinearPlan | None = None


def neighbor_ring(j: int) -> np.ndarray:
    """Integer (drow, dcol) base positions for J neighbours.

    J=8 is the 8-connected ring in row-major order; other J take the nearest
    cells by Chebyshev radius, then row, then column.
    """
    radius = 1
    while (2 * radius + 1) ** 2 - 1 < j:
        radius += 1
    cells = [(dr, dc) for dr in range(-radius, radius + 1) for dc in range(-radius, radius + 1)
             if (dr, dc) != (0, 0)]
    cells.sort(key=lambda rc: (max(abs(rc[0]), abs(rc[1])), rc[0], rc[1]))
    return np.array(cells[:j], dtype=np.int64)


def _check(depth: Tensor) -> None:
    if depth.ndim != 4:
        raise ShapeError(f"expected B x C x H x W, got {depth.shape}")


def _gather_local(field: Tensor, ring: np.ndarray) -> Tensor:
    B, C, H, W = field.shape
    r = int(np.abs(ring).max())
    # zero-pad via concatenation so the result stays on the tape
    zr = T.zeros((B, C, r, W), dtype=field.dtype)
    padded = T.concat([zr, field, zr], axis=2)
    zc = T.zeros((B, C, H + 2 * r, r), dtype=field.dtype)
    padded = T.concat([zc, padded, zc], axis=3)
    shifted = [padded[:, :, r + dr:r + dr + H, r + dc:r + dc + W] for dr, dc in ring]
    return T.concat(shifted, axis=1)


def neighbor_coords(offsets: Tensor, ring: np.ndarray) -> Tensor:
    """Continuous (row, col) of every neighbour, shaped (B, J*H*W, 2)."""
    B, twoJ, H, W = offsets.shape
    J = twoJ // 2
    rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    base = np.empty((J, H, W, 2), dtype=offsets.dtype)
    base[..., 0] = rr[None] + ring[:, 0, None, None]
    base[..., 1] = cc[None] + ring[:, 1, None, None]
    off = offsets.reshape(B, J, 2, H, W).transpose(0, 1, 3, 4, 2)
    return (off + Tensor(base[None])).reshape(B, J * H * W, 2)


def gather_neighbors(field: Tensor, offsets: Tensor | None, mode: str = "nonlocal",
                     neighbors: int | None = None, coords: Tensor | None = None,
                     plan: T.BilinearPlan | None = None) -> Tensor:
    """Stack the J neighbour values of a one-channel map into (B, J, H, W).

    ``coords``/``plan`` may carry precomputed neighbour positions (nonlocal mode).
    """
    _check(field)
    B, C, H, W = field.shape
    if C != 1:
        raise ShapeError("gather_neighbors expects a single-channel map")
    if mode == "fixed_local":
        J = neighbors if neighbors is not None else (offsets.shape[1] // 2 if offsets is not None else 8)
        return _gather_local(field, neighbor_ring(J))
    if mode != "nonlocal":
        raise ConfigError(f"unknown SPN mode {mode!r}")
    if offsets is None:
        raise ShapeError("nonlocal mode needs offsets")
    J = offsets.shape[1] // 2
    if offsets.shape != (B, 2 * J, H, W):
        raise ShapeError(f"offsets shape {offsets.shape} does not match field {field.shape}")
    if coords is None:
        coords = neighbor_coords(offsets, neighbor_ring(J))
    return T.bilinear_sample(field, coords, plan).reshape(B, J, H, W)


def normalize_affinity(raw: Tensor, confidence: Tensor, offsets: Tensor | None = None,
                       mode: str = "nonlocal", coords: Tensor | None = None,
                       plan: T.BilinearPlan | None = None) -> tuple[Tensor, Tensor]:
    """tanh(raw)/J, gated by the confidence found at each neighbour's location.

    Returns ``(w, w00)`` with ``w00 = 1 - sum_j w_j``; since every |w_j| < 1/J
    the absolute weights sum below one.
    """
    J = raw.shape[1]
    a = T.tanh(raw) * (1.0 / J)
    conf_nb = gather_neighbors(confidence, offsets, mode, J, coords, plan)
    w = a * conf_nb
    w00 = 1.0 - w.sum(axis=1, keepdims=True)
    return w, w00


def propagate_step(state: SpnState) -> SpnState:
    """One double-buffered propagation step (reads only ``state.depth``)."""
    nb = gather_neighbors(state.depth, state.offsets, state.mode, state.w.shape[1],
                          state.coords, state.plan)
    d = state.w00 * state.depth + (state.w * nb).sum(axis=1, keepdims=True)
    return replace(state, depth=d, step=state.step + 1)


def init_state(d0: Tensor, offsets: Tensor | None, affinity_raw: Tensor, confidence: Tensor,
               mode: str = "nonlocal") -> SpnState:
    coords = plan = None
    if mode == "nonlocal":
        if offsets is None:
            raise ShapeError("nonlocal mode needs offsets")
        coords = neighbor_coords(offsets, neighbor_ring(affinity_raw.shape[1]))
        plan = T.BilinearPlan(coords.data, d0.shape[2], d0.shape[3])
    w, w00 = normalize_affinity(affinity_raw, confidence, offsets, mode, coords, plan)
    return SpnState(d0, w, w00, offsets, confidence, mode, 0, coords, plan)


def refine(d0: Tensor, offsets: Tensor | None, affinity_raw: Tensor, confidence: Tensor,
           cfg: SpnConfig = SpnConfig()) -> Tensor:
    """Run ``cfg.iterations`` propagation steps with weights fixed per call."""
    _check(d0)
    if affinity_raw.shape[1] != cfg.neighbors:
        raise ShapeError(f"affinity has {affinity_raw.shape[1]} channels, config says {cfg.neighbors}")
    if cfg.iterations == 0:
        return d0
    state = init_state(d0, offsets, affinity_raw, confidence, cfg.mode)
    for _ in range(cfg.iterations):
        state = propagate_step(state)
    return state.depth
