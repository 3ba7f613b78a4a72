"""Quaternionic kinematic chain representation of a rope.

A rope of ``L`` points is stored as the base point plus ``L - 1`` unit
quaternions, each the zero-twist rotation taking the previous link direction
onto the next one.  The first rotation is taken relative to the world +X axis.
Quaternions are ``(w, x, y, z)`` arrays in canonical form (``w >= 0``).

The array-level helpers (``encode_positions``, ``decode_vectors``) accept any
number of leading batch dimensions and are what the model code uses; the
dataclass API mirrors them for single states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLink, DimensionMismatch, InvalidDirection

X_AXIS = np.array([1.0, 0.0, 0.0])
IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

UNIT_TOL = 1e-9
ANTIPARALLEL_TOL = 1e-9
DEGENERATE_LINK = 1e-9
DEGENERATE_BLOCK = 1e-6


@dataclass(frozen=True, eq=False)
class RopeState:
    positions: np.ndarray  # (L, 3), millimeters

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] < 2:
            raise DimensionMismatch(f"positions must be (L>=2, 3), got {p.shape}")
        object.__setattr__(self, "positions", p)

    @property
    def L(self) -> int:
        return self.positions.shape[0]

    def link_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.positions, axis=0), axis=1)


@dataclass(frozen=True, eq=False)
class QuatChainState:
    base: np.ndarray  # (3,)
    rotations: np.ndarray  # (L-1, 4)
    link_length: float
    degenerate: bool = False

    @property
    def L(self) -> int:
        return self.rotations.shape[0] + 1

    @property
    def dim(self) -> int:
        return state_dim(self.L)


def state_dim(L: int) -> int:
    return 3 + 4 * (L - 1)


def canonicalize(q: np.ndarray) -> np.ndarray:
    """Resolve the double cover: ``w >= 0``, ties broken by the first nonzero of x, y, z."""
    q = np.array(q, dtype=np.float64)
    w = q[..., 0]
    flip = w < 0
    zero_w = w == 0
    if np.any(zero_w):
        v = q[..., 1:]
        nz = v != 0
        first = np.argmax(nz, axis=-1)
        lead = np.take_along_axis(v, first[..., None], axis=-1)[..., 0]
        flip = flip | (zero_w & (lead < 0))
    return np.where(flip[..., None], -q, q)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) ``v`` by unit quaternion(s) ``q``."""
    w = q[..., :1]
    r = q[..., 1:]
    t = 2.0 * np.cross(r, v)
    return v + w * t + np.cross(r, t)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = np.moveaxis(a, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def _antiparallel_axis(u: np.ndarray) -> np.ndarray:
    # basis vector along u's smallest-magnitude component; argmin picks the lowest index on ties
    e = np.zeros_like(u)
    idx = np.argmin(np.abs(u), axis=-1)
    np.put_along_axis(e, idx[..., None], 1.0, axis=-1)
    axis = np.cross(u, e)
    return axis / np.linalg.norm(axis, axis=-1, keepdims=True)


def _shortest_arc(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Batched shortest-arc rotation; inputs assumed unit length."""
    dot = np.sum(u * v, axis=-1)
    half = u + v
    half_norm = np.linalg.norm(half, axis=-1, keepdims=True)
    anti = dot < -1.0 + ANTIPARALLEL_TOL
    safe = np.where(anti[..., None], 1.0, half_norm)
    h = half / safe
    q = np.concatenate([np.sum(u * h, axis=-1, keepdims=True), np.cross(u, h)], axis=-1)
    if np.any(anti):
        flip = np.concatenate([np.zeros(anti.shape + (1,)), _antiparallel_axis(u)], axis=-1)
        q = np.where(anti[..., None], flip, q)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return canonicalize(q)


def shortest_arc(u, v) -> np.ndarray:
    """Zero-twist unit quaternion rotating unit vector ``u`` onto unit vector ``v``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    for name, vec in (("u", u), ("v", v)):
        if vec.shape[-1:] != (3,) or np.any(np.abs(np.linalg.norm(vec, axis=-1) - 1.0) > UNIT_TOL):
            raise InvalidDirection(f"{name} is not a unit 3-vector: {vec}")
    return _shortest_arc(u, v)


def encode_positions(positions: np.ndarray) -> np.ndarray:
    """Positions ``(..., L, 3)`` to flattened chain vectors ``(..., 3 + 4(L-1))``."""
    p = np.asarray(positions, dtype=np.float64)
    links = np.diff(p, axis=-2)
    norms = np.linalg.norm(links, axis=-1, keepdims=True)
    if np.any(norms <= DEGENERATE_LINK):
        raise DegenerateLink("coincident consecutive points")
    d = links / norms
    prev = np.concatenate([np.broadcast_to(X_AXIS, d[..., :1, :].shape), d[..., :-1, :]], axis=-2)
    q = _shortest_arc(prev, d)
    flat_q = q.reshape(q.shape[:-2] + (-1,))
    return np.concatenate([p[..., 0, :], flat_q], axis=-1)


def normalize_blocks(vectors: np.ndarray, L: int):
    """Split raw vectors into base and canonical unit quaternions.

    Returns ``(base, quats, degenerate)`` where ``degenerate`` flags (per
    leading index) whether any 4-block had norm below 1e-6 and was replaced
    by the identity.
    """
    v = np.asarray(vectors, dtype=np.float64)
    if v.shape[-1] != state_dim(L):
        raise DimensionMismatch(f"expected vector length {state_dim(L)}, got {v.shape[-1]}")
    base = v[..., :3]
    q = v[..., 3:].reshape(v.shape[:-1] + (L - 1, 4))
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    bad = n[..., 0] < DEGENERATE_BLOCK
    # already-unit blocks pass through untouched so flatten/unflatten is bit-exact
    scale = np.where(bad[..., None] | (np.abs(n - 1.0) <= 1e-12), 1.0, n)
    q = np.where(bad[..., None], IDENTITY, q / scale)
    return base, canonicalize(q), np.any(bad, axis=-1)


def decode_quats(base: np.ndarray, quats: np.ndarray, link_length: float) -> np.ndarray:
    """Forward kinematics: ``(..., 3)`` base and ``(..., L-1, 4)`` rotations to ``(..., L, 3)``."""
    n_links = quats.shape[-2]
    out = np.empty(quats.shape[:-2] + (n_links + 1, 3))
    out[..., 0, :] = base
    d = np.broadcast_to(X_AXIS, base.shape)
    for i in range(n_links):
        d = quat_rotate(quats[..., i, :], d)
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        out[..., i + 1, :] = out[..., i, :] + link_length * d
    return out


def decode_vectors(vectors: np.ndarray, L: int, link_length: float) -> np.ndarray:
    """Raw (possibly unnormalized) chain vectors to Cartesian positions."""
    base, quats, _ = normalize_blocks(vectors, L)
    return decode_quats(base, quats, link_length)


def encode_chain(state: RopeState, link_length: float) -> QuatChainState:
    v = encode_positions(state.positions)
    return QuatChainState(v[:3].copy(), v[3:].reshape(-1, 4), float(link_length))


def decode_chain(qcs: QuatChainState) -> RopeState:
    return RopeState(decode_quats(qcs.base, qcs.rotations, qcs.link_length))


def flatten(qcs: QuatChainState) -> np.ndarray:
    return np.concatenate([qcs.base, qcs.rotations.reshape(-1)])


def unflatten(v, L: int, link_length: float) -> QuatChainState:
    base, quats, bad = normalize_blocks(v, L)
    return QuatChainState(base.copy(), quats, float(link_length), bool(bad))
