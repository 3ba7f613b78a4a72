"""Quasi-static rope simulator used to generate pick-and-place trajectories.

The rope is a chain of ``L`` points spaced ``link_length`` apart, each the
centre of a sphere of radius ``rope_radius`` resting on the plane
``z = rope_radius``.  There are no velocities: every substep moves the
grasped point along its commanded path and then projects the constraints

    gravity sag -> link length -> ground -> self-collision -> bending -> friction

for ``relax_iters`` rounds.  After each action a gravity-free polish pass
drives the rest state onto the constraint manifold within ``link_tol``.

Everything is a pure function of ``(SimConfig, seed)``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace

import numba
import numpy as np

from .errors import ConfigError, InvalidGrasp, SimulationError
from .quatchain import RopeState

CONTACT_EPS = 1e-6


@dataclass(frozen=True)
class SimConfig:
    L: int = 20
    link_length: float = 10.0
    rope_radius: float = 5.0
    ground_friction: float = 1.0
    bending_stiffness: float = 0.005
    damping: float = 0.05
    z_lift: float = 50.0
    action_translation: float = 50.0
    substeps: int = 10
    relax_iters: int = 20
    settle_iters: int = 200
    polish_iters: int = 3000
    gravity_step: float = 1.0
    slip_threshold: float = 0.05
    init_jitter: float = 0.1
    link_tol: float = 1e-3
    horizon: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.L < 2:
            raise ConfigError("L must be at least 2")
        for f in ("link_length", "rope_radius", "ground_friction", "bending_stiffness", "damping",
                  "z_lift", "action_translation", "gravity_step", "slip_threshold"):
            if not getattr(self, f) > 0:
                raise ConfigError(f"{f} must be positive")
        for f in ("substeps", "relax_iters", "settle_iters", "polish_iters"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be at least 1")
        if not 0 < self.link_tol < 0.05:
            raise ConfigError("link_tol must lie in (0, 0.05)")
        if self.init_jitter < 0:
            raise ConfigError("init_jitter must be non-negative")
        if self.horizon < 0:
            raise ConfigError("horizon must be non-negative")

    @classmethod
    def full_scale(cls, **overrides) -> "SimConfig":
        return replace(cls(L=70, horizon=100), **overrides)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown simulator keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PickPlaceAction:
    grasp_index: int
    displacement: tuple  # (dx, dy) millimeters

    def as_array(self) -> np.ndarray:
        return np.asarray(self.displacement, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray  # (T+1, L, 3)
    grasp: np.ndarray  # (T,) int
    displacement: np.ndarray  # (T, 2)
    seed: int

    @property
    def T(self) -> int:
        return len(self.grasp)

    @property
    def L(self) -> int:
        return self.states.shape[1]

    def state(self, t: int) -> RopeState:
        return RopeState(self.states[t])

    def action(self, t: int) -> PickPlaceAction:
        return PickPlaceAction(int(self.grasp[t]), tuple(float(x) for x in self.displacement[t]))

    @property
    def actions(self):
        return [self.action(t) for t in range(self.T)]

    def equals(self, other: "Trajectory") -> bool:
        return (
            self.seed == other.seed
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.grasp, other.grasp)
            and np.array_equal(self.displacement, other.displacement)
        )


# ------------------------------------------------------------------ kernels


@numba.njit(cache=True)
def _project_links(pos, pin, ell, reverse):
    n = pos.shape[0] - 1
    for k in range(n):
        i = n - 1 - k if reverse else k
        j = i + 1
        wi = 0.0 if i == pin else 1.0
        wj = 0.0 if j == pin else 1.0
        wsum = wi + wj
        if wsum == 0.0:
            continue
        dx = pos[j, 0] - pos[i, 0]
        dy = pos[j, 1] - pos[i, 1]
        dz = pos[j, 2] - pos[i, 2]
        dist = math.sqrt(dx * dx + dy * dy + dz * dz)
        if dist < ell and dx * dx + dy * dy < 1e-18 * ell * ell:
            # a vertically compressed link has no preferred planar side: tip it over along +x
            hx = math.sqrt(ell * ell - dz * dz)
            pos[i, 0] -= wi / wsum * hx
            pos[j, 0] += wj / wsum * hx
            continue
        c = (dist - ell) / (wsum * dist)
        pos[i, 0] += wi * c * dx
        pos[i, 1] += wi * c * dy
        pos[i, 2] += wi * c * dz
        pos[j, 0] -= wj * c * dx
        pos[j, 1] -= wj * c * dy
        pos[j, 2] -= wj * c * dz


@numba.njit(cache=True)
def _project_ground(pos, pin, radius):
    for i in range(pos.shape[0]):
        if i != pin and pos[i, 2] < radius:
            pos[i, 2] = radius


@numba.njit(cache=True)
def _project_collisions(pos, pin, radius):
    L = pos.shape[0]
    min_d = 2.0 * radius
    for i in range(L):
        for j in range(i + 2, L):
            dx = pos[j, 0] - pos[i, 0]
            dy = pos[j, 1] - pos[i, 1]
            dz = pos[j, 2] - pos[i, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 >= min_d * min_d:
                continue
            dist = math.sqrt(d2)
            dxy = math.sqrt(dx * dx + dy * dy)
            wi = 0.0 if i == pin else 1.0
            wj = 0.0 if j == pin else 1.0
            if dxy < radius:
                # crossing strands stack: push the higher one up, the lower one down
                if dz > 0.0 or (dz == 0.0 and j > i):
                    up, lo = j, i
                else:
                    up, lo = i, j
                wu = wj if up == j else wi
                wl = wj if lo == j else wi
                if pos[lo, 2] <= radius + CONTACT_EPS:
                    wl = 0.0
                gap = abs(dz)
                need = math.sqrt(min_d * min_d - dxy * dxy) - gap
                if wu + wl > 0.0:
                    pos[up, 2] += need * wu / (wu + wl)
                    pos[lo, 2] -= need * wl / (wu + wl)
                elif lo != pin:
                    # upper pinned and lower on the ground: shove the lower one aside
                    if dxy > 1e-9:
                        nx = (pos[lo, 0] - pos[up, 0]) / dxy
                        ny = (pos[lo, 1] - pos[up, 1]) / dxy
                    else:
                        nx = 1.0
                        ny = 0.0
                    target = math.sqrt(max(min_d * min_d - gap * gap, 0.0))
                    pos[lo, 0] += (target - dxy) * nx
                    pos[lo, 1] += (target - dxy) * ny
            else:
                wsum = wi + wj
                if wsum == 0.0:
                    continue
                c = (min_d - dist) / (wsum * dist)
                pos[i, 0] -= wi * c * dx
                pos[i, 1] -= wi * c * dy
                pos[i, 2] -= wi * c * dz
                pos[j, 0] += wj * c * dx
                pos[j, 1] += wj * c * dy
                pos[j, 2] += wj * c * dz
            for k in (i, j):
                if k != pin and pos[k, 2] < radius:
                    pos[k, 2] = radius


@numba.njit(cache=True)
def _relax_kernel(pos, pin, pin_pos, iters, ell, radius, gravity, bend, viscous, slip, round0):
    L = pos.shape[0]
    start = np.empty_like(pos)
    if pin >= 0:
        pos[pin, 0] = pin_pos[0]
        pos[pin, 1] = pin_pos[1]
        pos[pin, 2] = pin_pos[2]
    for it in range(iters):
        start[:, :] = pos
        for i in range(L):
            if i != pin:
                pos[i, 2] -= gravity
        _project_links(pos, pin, ell, (round0 + it) % 2 == 1)
        _project_ground(pos, pin, radius)
        _project_collisions(pos, pin, radius)
        for i in range(1, L - 1):
            if i == pin:
                continue
            for c in range(3):
                pos[i, c] += bend * (0.5 * (pos[i - 1, c] + pos[i + 1, c]) - pos[i, c])
        # Coulomb-style ground friction: a viscous fraction of every planar move is
        # removed and moves shorter than the slip threshold are frozen entirely
        for i in range(L):
            if i != pin and pos[i, 2] <= radius + CONTACT_EPS:
                mx = pos[i, 0] - start[i, 0]
                my = pos[i, 1] - start[i, 1]
                m = math.sqrt(mx * mx + my * my)
                if m == 0.0:
                    continue
                scale = max(0.0, 1.0 - viscous - slip / m)
                pos[i, 0] = start[i, 0] + scale * mx
                pos[i, 1] = start[i, 1] + scale * my


@numba.njit(cache=True)
def _violations(pos, ell, radius):
    L = pos.shape[0]
    link = 0.0
    for i in range(L - 1):
        d = math.sqrt(
            (pos[i + 1, 0] - pos[i, 0]) ** 2 + (pos[i + 1, 1] - pos[i, 1]) ** 2 + (pos[i + 1, 2] - pos[i, 2]) ** 2
        )
        link = max(link, abs(d - ell))
    overlap = 0.0
    for i in range(L):
        for j in range(i + 2, L):
            d = math.sqrt(
                (pos[j, 0] - pos[i, 0]) ** 2 + (pos[j, 1] - pos[i, 1]) ** 2 + (pos[j, 2] - pos[i, 2]) ** 2
            )
            overlap = max(overlap, 2.0 * radius - d)
    ground = 0.0
    for i in range(L):
        ground = max(ground, radius - pos[i, 2])
    return link, overlap, ground


@numba.njit(cache=True)
def _follow_leader(pos, anchor, ell):
    """Restore every link to exactly ``ell`` walking outward from ``anchor``."""
    L = pos.shape[0]
    for step in (1, -1):
        i = anchor
        while 0 <= i + step < L:
            j = i + step
            dx = pos[j, 0] - pos[i, 0]
            dy = pos[j, 1] - pos[i, 1]
            dz = pos[j, 2] - pos[i, 2]
            dist = math.sqrt(dx * dx + dy * dy + dz * dz)
            if dist > 1e-12:
                f = ell / dist
                pos[j, 0] = pos[i, 0] + f * dx
                pos[j, 1] = pos[i, 1] + f * dy
                pos[j, 2] = pos[i, 2] + f * dz
            i = j


@numba.njit(cache=True)
def _polish_kernel(pos, pin, pin_pos, max_iters, ell, radius, link_goal, overlap_goal):
    """Gravity- and friction-free projection; returns rounds used (``max_iters`` if unconverged)."""
    if pin >= 0:
        pos[pin, 0] = pin_pos[0]
        pos[pin, 1] = pin_pos[1]
        pos[pin, 2] = pin_pos[2]
    anchor = pin if pin >= 0 else pos.shape[0] // 2
    for it in range(max_iters):
        link, overlap, ground = _violations(pos, ell, radius)
        if link <= link_goal and overlap <= overlap_goal and ground <= 0.0:
            return it
        _project_collisions(pos, pin, radius)
        if it % 2 == 0:
            _project_links(pos, pin, ell, it % 4 == 2)
        else:
            _follow_leader(pos, anchor, ell)
        _project_ground(pos, pin, radius)
    return max_iters


# --------------------------------------------------------------------- API


def _friction_args(config: SimConfig):
    mu = config.ground_friction
    return mu * config.damping, mu * config.slip_threshold


def relax(state: RopeState, config: SimConfig, grasped=None, iters=None, gravity=True) -> RopeState:
    """Project the rope onto its constraints for ``relax_iters`` rounds.

    ``grasped`` is ``None`` or ``(index, position)``; the pinned point never
    moves.  Returns a new state.
    """
    pos = np.array(state.positions, dtype=np.float64)
    pin, pin_pos = _pin_args(grasped, pos.shape[0])
    _relax_kernel(
        pos, pin, pin_pos, config.relax_iters if iters is None else iters, config.link_length,
        config.rope_radius, config.gravity_step if gravity else 0.0, config.bending_stiffness,
        *_friction_args(config), 0,
    )
    return RopeState(pos)


def polish(state: RopeState, config: SimConfig, grasped=None) -> RopeState:
    """Gravity-free projection until the rest-state tolerances hold."""
    pos = np.array(state.positions, dtype=np.float64)
    pin, pin_pos = _pin_args(grasped, pos.shape[0])
    _polish(pos, pin, pin_pos, config)
    return RopeState(pos)


def _pin_args(grasped, L):
    if grasped is None:
        return -1, np.zeros(3)
    idx, p = grasped
    if not 0 <= idx < L:
        raise InvalidGrasp(f"grasp index {idx} outside [0, {L})")
    return int(idx), np.asarray(p, dtype=np.float64)


def _polish(pos, pin, pin_pos, config) -> bool:
    ell = config.link_length
    used = _polish_kernel(
        pos, pin, pin_pos, config.polish_iters, ell, config.rope_radius,
        0.1 * config.link_tol * ell, 0.5 * config.link_tol * ell,
    )
    return used < config.polish_iters


def _support_height(pos, index, xy, radius):
    """Lowest z at ``xy`` where point ``index`` rests on the plane or on the rope."""
    z = radius
    d = 2.0 * radius
    for j in range(pos.shape[0]):
        if abs(j - index) < 2:
            continue
        dxy = math.hypot(pos[j, 0] - xy[0], pos[j, 1] - xy[1])
        if dxy < d:
            z = max(z, pos[j, 2] + math.sqrt(d * d - dxy * dxy))
    return z


def _drive(pos, pin, path_start, path_end, config, round0, land=False):
    """Move the pinned point from ``path_start`` to ``path_end`` in substeps.

    With ``land`` the descent stops on contact with the rope below.
    """
    S = config.substeps
    for s in range(1, S + 1):
        target = path_start + (path_end - path_start) * (s / S)
        if land:
            target[2] = max(target[2], _support_height(pos, pin, target, config.rope_radius))
        _relax_kernel(
            pos, pin, target, config.relax_iters, config.link_length, config.rope_radius,
            config.gravity_step, config.bending_stiffness, *_friction_args(config), round0,
        )
        round0 += config.relax_iters
    return round0


def _pick_place(pos, index, delta_xy, config):
    r = config.rope_radius
    start = pos[index].copy()
    lifted = start + np.array([0.0, 0.0, config.z_lift])
    moved = lifted + np.array([delta_xy[0], delta_xy[1], 0.0])
    placed = np.array([moved[0], moved[1], r])
    round0 = _drive(pos, index, start, lifted, config, 0)
    round0 = _drive(pos, index, lifted, moved, config, round0)
    round0 = _drive(pos, index, moved, placed, config, round0, land=True)
    placed = pos[index].copy()
    # the gripper opens once the rope has come to rest around the placed point
    _relax_kernel(
        pos, index, placed, config.settle_iters, config.link_length, r, config.gravity_step,
        config.bending_stiffness, *_friction_args(config), round0,
    )
    if _polish(pos, index, placed, config):
        return
    # the pinned point jams the rest state: let go and settle freely
    for _ in range(4):
        _relax_kernel(
            pos, -1, placed, config.settle_iters, config.link_length, r, config.gravity_step,
            config.bending_stiffness, *_friction_args(config), 0,
        )
        if _polish(pos, -1, placed, config):
            return


def straight_rope(config: SimConfig) -> RopeState:
    xs = (np.arange(config.L) - (config.L - 1) / 2.0) * config.link_length
    pos = np.zeros((config.L, 3))
    pos[:, 0] = xs
    pos[:, 2] = config.rope_radius
    return RopeState(pos)


def init_rope(config: SimConfig, rng: np.random.Generator) -> RopeState:
    pos = np.array(straight_rope(config).positions)
    # sub-millimetre lateral jitter breaks the planar symmetry of the straight layout
    pos[:, 1] += rng.uniform(-config.init_jitter, config.init_jitter, config.L)
    index = int(rng.integers(config.L))
    _pick_place(pos, index, (0.0, 0.0), config)
    return RopeState(pos)


def step_action(state: RopeState, action: PickPlaceAction, config: SimConfig) -> RopeState:
    L = state.L
    if not 0 <= action.grasp_index < L:
        raise InvalidGrasp(f"grasp index {action.grasp_index} outside [0, {L})")
    pos = np.array(state.positions, dtype=np.float64)
    _pick_place(pos, int(action.grasp_index), action.as_array(), config)
    return RopeState(pos)


def check_state(positions: np.ndarray, config: SimConfig, tol_factor: float = 1.0) -> dict:
    """Invariant report for a rest state; ``valid`` is the conjunction."""
    link, overlap, ground = _violations(np.ascontiguousarray(positions, dtype=np.float64),
                                        config.link_length, config.rope_radius)
    tol = config.link_tol * config.link_length * tol_factor
    report = {
        "max_link_error": link,
        "max_overlap": overlap,
        "max_penetration": ground,
        "link_ok": link <= tol,
        "collision_ok": overlap <= 10.0 * tol,
        "ground_ok": ground <= 1e-6,
    }
    report["valid"] = report["link_ok"] and report["collision_ok"] and report["ground_ok"]
    return report


def sample_action(rng: np.random.Generator, config: SimConfig) -> PickPlaceAction:
    index = int(rng.integers(config.L))
    heading = rng.uniform(0.0, 2.0 * np.pi)
    d = config.action_translation
    return PickPlaceAction(index, (d * math.cos(heading), d * math.sin(heading)))


def generate_trajectory(config: SimConfig, seed: int) -> Trajectory:
    rng = np.random.default_rng(seed)
    T = config.horizon
    states = np.empty((T + 1, config.L, 3))
    grasp = np.empty(T, dtype=np.int64)
    disp = np.empty((T, 2))
    state = init_rope(config, rng)
    states[0] = state.positions
    for t in range(T):
        action = sample_action(rng, config)
        state = step_action(state, action, config)
        grasp[t] = action.grasp_index
        disp[t] = action.displacement
        states[t + 1] = state.positions
    for t in range(T + 1):
        report = check_state(states[t], config)
        if not report["valid"]:
            raise SimulationError(f"seed {seed} step {t}: invalid rest state {report}")
    return Trajectory(states, grasp, disp, int(seed))


def _generate_one(args):
    config, seed = args
    return generate_trajectory(config, seed)


def default_workers() -> int:
    return max(1, int(os.environ.get("DLOLAB_WORKERS", "1")))


def generate_dataset(config: SimConfig, n_trajectories: int, base_seed: int, workers: int | None = None):
    """Trajectory ``k`` uses seed ``base_seed + k``; output does not depend on ``workers``."""
    if n_trajectories < 1:
        raise ConfigError("n_trajectories must be at least 1")
    workers = default_workers() if workers is None else workers
    jobs = [(config, base_seed + k) for k in range(n_trajectories)]
    if workers <= 1:
        return [_generate_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_generate_one, jobs, chunksize=max(1, n_trajectories // (4 * workers))))
