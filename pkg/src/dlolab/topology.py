"""Gauss codes of rope states and exact-match topology scoring.

The rope is read as a directed polyline from point 0 to point ``L - 1`` and
projected onto the XY plane.  Every proper intersection between
non-adjacent segments is a crossing; crossings are labelled ``1..C`` in the
order the traversal first meets them, and the code lists ``+label`` when the
traversal passes over and ``-label`` when it passes under.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import AmbiguousCrossing, ProtocolError

DEFAULT_EPS = 1e-6


@dataclass(frozen=True)
class Crossing:
    label: int
    seg_a: int
    t_a: float
    seg_b: int
    t_b: float
    over_first: bool

    @property
    def s_a(self) -> float:
        return self.seg_a + self.t_a

    @property
    def s_b(self) -> float:
        return self.seg_b + self.t_b


@dataclass(frozen=True)
class CrossingSet:
    crossings: tuple
    grazing: int  # near-endpoint intersections that were skipped


def _link_scale(p: np.ndarray) -> float:
    return float(np.mean(np.linalg.norm(np.diff(p, axis=0), axis=1)))


def _raw_crossings(p: np.ndarray, eps: float):
    """Float path: vectorised test of every segment pair with ``j - i > 1``."""
    n = p.shape[0] - 1
    if n < 3:
        return [], 0
    i, j = np.triu_indices(n, k=2)
    a0, a1 = p[i, :2], p[i + 1, :2]
    b0, b1 = p[j, :2], p[j + 1, :2]
    da = a1 - a0
    db = b1 - b0
    w = b0 - a0
    den = da[:, 0] * db[:, 1] - da[:, 1] * db[:, 0]
    num_t = w[:, 0] * db[:, 1] - w[:, 1] * db[:, 0]
    num_s = w[:, 0] * da[:, 1] - w[:, 1] * da[:, 0]
    nz = den != 0
    t = np.where(nz, num_t / np.where(nz, den, 1.0), -1.0)
    s = np.where(nz, num_s / np.where(nz, den, 1.0), -1.0)
    inside = nz & (t >= 0) & (t <= 1) & (s >= 0) & (s <= 1)
    proper = inside & (t > eps) & (t < 1 - eps) & (s > eps) & (s < 1 - eps)
    grazing = int(np.count_nonzero(inside & ~proper))
    out = []
    for k in np.flatnonzero(proper):
        ia, ib, ta, tb = int(i[k]), int(j[k]), float(t[k]), float(s[k])
        za = p[ia, 2] + ta * (p[ia + 1, 2] - p[ia, 2])
        zb = p[ib, 2] + tb * (p[ib + 1, 2] - p[ib, 2])
        out.append((ia, ta, ib, tb, za, zb))
    return out, grazing


def _label(raw, z_tol):
    for ia, ta, ib, tb, za, zb in raw:
        if abs(za - zb) <= z_tol:
            raise AmbiguousCrossing(
                f"segments {ia} and {ib} cross at equal height {float(za):.6g}", segments=(ia, ib)
            )
    raw = sorted(raw, key=lambda r: (r[0] + r[1], r[2] + r[3]))
    return tuple(
        Crossing(k + 1, ia, float(ta), ib, float(tb), bool(za > zb))
        for k, (ia, ta, ib, tb, za, zb) in enumerate(raw)
    )


def crossing_set(positions, eps: float = DEFAULT_EPS) -> CrossingSet:
    p = np.asarray(positions, dtype=np.float64)
    raw, grazing = _raw_crossings(p, eps)
    return CrossingSet(_label(raw, eps * _link_scale(p)), grazing)


def find_crossings(positions, eps: float = DEFAULT_EPS) -> list:
    """Labelled crossings of the XY projection.

    ``eps`` bounds the intersection parameters away from segment endpoints
    and, scaled by the mean link length, is the height gap below which a
    crossing is ambiguous.
    """
    return list(crossing_set(positions, eps).crossings)


def code_from_crossings(crossings) -> list:
    events = []
    for c in crossings:
        events.append((c.s_a, c.label if c.over_first else -c.label))
        events.append((c.s_b, -c.label if c.over_first else c.label))
    events.sort(key=lambda e: e[0])
    return [v for _, v in events]


def gauss_code(positions, eps: float = DEFAULT_EPS) -> list:
    return code_from_crossings(find_crossings(positions, eps))


def oracle_gauss_code(positions, eps: float = DEFAULT_EPS) -> list:
    """Independent brute-force Gauss code in exact rational arithmetic.

    Every float coordinate converts to a :class:`~fractions.Fraction` without
    rounding, so orientation signs and intersection parameters are exact.
    Only meant for verification; it is slow.
    """
    pts = [tuple(Fraction(float(c)) for c in row) for row in np.asarray(positions, dtype=np.float64)]
    n = len(pts) - 1
    feps = Fraction(eps)
    lengths = [
        np.sqrt(sum(float(pts[k + 1][c] - pts[k][c]) ** 2 for c in range(3))) for k in range(n)
    ]
    z_tol = Fraction(eps * float(np.mean(lengths))) if n else Fraction(0)
    raw = []
    for i in range(n):
        ax, ay, az = pts[i]
        bx, by, bz = pts[i + 1]
        for j in range(i + 2, n):
            cx, cy, cz = pts[j]
            dx, dy, dz = pts[j + 1]
            ux, uy = bx - ax, by - ay
            vx, vy = dx - cx, dy - cy
            den = ux * vy - uy * vx
            if den == 0:
                continue
            wx, wy = cx - ax, cy - ay
            t = (wx * vy - wy * vx) / den
            s = (wx * uy - wy * ux) / den
            if not (feps < t < 1 - feps and feps < s < 1 - feps):
                continue
            za = az + t * (bz - az)
            zb = cz + s * (dz - cz)
            raw.append((i, t, j, s, za, zb))
    return code_from_crossings(_label(raw, z_tol))


@dataclass(frozen=True)
class TopologyScore:
    match: np.ndarray  # (H,) 1.0 where codes agree exactly
    ambiguous: np.ndarray  # (H,) bool, either side ambiguous


def _safe_code(p, eps):
    try:
        return gauss_code(p, eps)
    except AmbiguousCrossing:
        return None


def topology_accuracy(pred_states, truth_states, eps: float = DEFAULT_EPS) -> TopologyScore:
    """Per-step exact Gauss-code agreement for one rollout."""
    if len(pred_states) != len(truth_states):
        raise ProtocolError(f"{len(pred_states)} predicted vs {len(truth_states)} true states")
    match = np.zeros(len(pred_states))
    amb = np.zeros(len(pred_states), dtype=bool)
    for k, (p, q) in enumerate(zip(pred_states, truth_states)):
        a, b = _safe_code(np.asarray(p), eps), _safe_code(np.asarray(q), eps)
        if a is None or b is None:
            amb[k] = True
        else:
            match[k] = float(a == b)
    return TopologyScore(match, amb)


def aggregate_topology(scores) -> dict:
    """Mean/std of the match indicator and ambiguous fraction per step."""
    m = np.stack([s.match for s in scores])
    a = np.stack([s.ambiguous for s in scores])
    return {
        "step": np.arange(1, m.shape[1] + 1),
        "match_fraction_mean": m.mean(axis=0),
        "match_fraction_std": m.std(axis=0),
        "ambiguous_fraction": a.mean(axis=0),
    }


def n_crossings(positions, eps: float = DEFAULT_EPS) -> int:
    p = np.asarray(positions, dtype=np.float64)
    return len(_raw_crossings(p, eps)[0])
