"""Open-loop evaluation: posterior warmup, latent rollouts, RMSE and latency.

A rollout window holds ``warmup + H`` consecutive states and the actions
between them.  The predictor sees states ``0..warmup-1`` with the
``warmup - 1`` actions linking them, then only the remaining ``H`` actions,
and predicts states ``warmup..warmup+H-1``.  Step ``k`` (1-based) of a curve
compares the k-th predicted state with its ground truth.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import EmptyDataset, ProtocolError, ShapeError, WindowTooLong
from .quatchain import decode_vectors, encode_positions
from .rssm import RSSM, LatentState

DEFAULT_WARMUP = 5
DEFAULT_HORIZON = 20
DEFAULT_ROLLOUTS = 100


def _batched(states, grasp, disp):
    states = np.asarray(states)
    if states.ndim == 2:
        return states[None], np.asarray(grasp)[None], np.asarray(disp)[None], True
    return states, np.asarray(grasp), np.asarray(disp), False


def warmup(model: RSSM, states, grasp, displacement) -> LatentState:
    """Posterior pass over ground-truth chain vectors using distribution means.

    ``states`` is ``(w, D)`` or ``(B, w, D)`` with ``w - 1`` linking actions.
    Returns the latent after absorbing the last state.
    """
    states, grasp, displacement, _ = _batched(states, grasp, displacement)
    B, w = states.shape[:2]
    if w < 1:
        raise ProtocolError("warmup needs at least one state")
    if grasp.shape != (B, w - 1) or displacement.shape != (B, w - 1, 2):
        raise ProtocolError(f"{w} warmup states need {w - 1} actions, got {grasp.shape[-1]}")
    s = model.to_model_space(states)
    latent = model.initial_state(B)
    for t in range(w):
        e = model.encode_state(ad.Tensor(s[:, t]))
        dist, z = model.posterior(latent.h, e)
        latent = LatentState(latent.h, z, dist)
        if t < w - 1:
            a = model.encode_action(grasp[:, t], displacement[:, t])
            latent = LatentState(model.recurrent_step(latent, a), z)
    return latent


def open_loop(model: RSSM, latent: LatentState, grasp, displacement, H: int | None = None) -> np.ndarray:
    """Dream forward on prior means; returns Cartesian positions ``(B, H, L, 3)``."""
    grasp = np.atleast_2d(np.asarray(grasp))
    displacement = np.asarray(displacement).reshape(grasp.shape + (2,))
    if H is None:
        H = grasp.shape[1]
    if H < 1:
        raise ProtocolError("horizon must be at least 1")
    if grasp.shape[1] != H:
        raise ProtocolError(f"{grasp.shape[1]} actions supplied for horizon {H}")
    B = latent.h.shape[0]
    if grasp.shape[0] != B:
        raise ProtocolError(f"{grasp.shape[0]} action rows for {B} latents")
    out = np.empty((B, H, model.dim))
    for k in range(H):
        a = model.encode_action(grasp[:, k], displacement[:, k])
        h = model.recurrent_step(latent, a)
        dist, z = model.prior(h)
        out[:, k] = model.from_model_space(model.decode_pred(h, z).data)
        latent = LatentState(h, z, dist)
    return decode_vectors(out, model.L, model.link_length)


def rmse(pred, truth) -> np.ndarray:
    """Root mean squared point distance in mm; trailing axes are ``(L, 3)``."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.shape[-1] != 3:
        raise ShapeError(f"rmse needs equal (..., L, 3) shapes, got {pred.shape} and {truth.shape}")
    return np.sqrt(np.mean(np.sum((pred - truth) ** 2, axis=-1), axis=-1))


# ------------------------------------------------------------- predictors


@dataclass(frozen=True)
class Window:
    positions: np.ndarray  # (B, warmup + H, L, 3)
    grasp: np.ndarray  # (B, warmup + H - 1)
    displacement: np.ndarray  # (B, warmup + H - 1, 2)
    picks: np.ndarray  # (B, 2) trajectory id and start offset
    warmup: int

    @property
    def H(self) -> int:
        return self.positions.shape[1] - self.warmup

    @property
    def truth(self) -> np.ndarray:
        return self.positions[:, self.warmup:]


class ModelPredictor:
    name = "rssm"

    def __init__(self, model: RSSM):
        self.model = model

    def predict(self, win: Window) -> np.ndarray:
        w = win.warmup
        chains = encode_positions(win.positions[:, :w])
        latent = warmup(self.model, chains, win.grasp[:, :w - 1], win.displacement[:, :w - 1])
        return open_loop(self.model, latent, win.grasp[:, w - 1:], win.displacement[:, w - 1:], win.H)


class PersistencePredictor:
    """Repeats the last warmup state for every future step."""

    name = "persistence"

    def predict(self, win: Window) -> np.ndarray:
        last = win.positions[:, win.warmup - 1]
        return np.repeat(last[:, None], win.H, axis=1)


class OraclePredictor:
    """Returns the ground truth; a protocol check that must score zero error."""

    name = "oracle"

    def predict(self, win: Window) -> np.ndarray:
        return win.truth.copy()


# ------------------------------------------------------------- evaluation


def draw_windows(dataset, n_rollouts: int, warmup_len: int, H: int, seed: int, split: str = "test") -> np.ndarray:
    """``(n_rollouts, 2)`` picks drawn without replacement when possible."""
    if warmup_len < 1 or H < 1 or n_rollouts < 1:
        raise ProtocolError("warmup, horizon and rollout count must be at least 1")
    try:
        win = dataset.windows(split, warmup_len + H)
    except WindowTooLong as exc:
        raise EmptyDataset(f"trajectories too short for warmup {warmup_len} + horizon {H}") from exc
    if len(win) == 0:
        raise EmptyDataset(f"no rollout windows in split {split!r}")
    rng = np.random.default_rng(seed)
    take = rng.choice(len(win), size=n_rollouts, replace=n_rollouts > len(win))
    return win[np.sort(take)]


def make_window(dataset, picks: np.ndarray, warmup_len: int, H: int) -> Window:
    n = warmup_len + H
    pos = np.stack([dataset.trajectories[k].states[o:o + n] for k, o in picks])
    grasp = np.stack([dataset.trajectories[k].grasp[o:o + n - 1] for k, o in picks])
    disp = np.stack([dataset.trajectories[k].displacement[o:o + n - 1] for k, o in picks])
    return Window(pos, grasp, disp, np.asarray(picks), warmup_len)


@dataclass
class RolloutReport:
    steps: np.ndarray
    rmse_mean_mm: np.ndarray
    rmse_std_mm: np.ndarray
    per_rollout: np.ndarray  # (n_rollouts, H)
    warmup: int
    n_rollouts: int
    predictor: str
    max_link_error: float

    @property
    def H(self) -> int:
        return len(self.steps)

    def rows(self):
        return [
            {"step": int(s), "rmse_mean_mm": float(m), "rmse_std_mm": float(d)}
            for s, m, d in zip(self.steps, self.rmse_mean_mm, self.rmse_std_mm)
        ]


def run_rollouts(predictor, dataset, n_rollouts=DEFAULT_ROLLOUTS, warmup_len=DEFAULT_WARMUP,
                 H=DEFAULT_HORIZON, seed=0, split="test", chunk=128):
    """Predictions and the windows they came from, in chunks of ``chunk`` rollouts."""
    picks = draw_windows(dataset, n_rollouts, warmup_len, H, seed, split)
    wins, preds = [], []
    for start in range(0, len(picks), chunk):
        win = make_window(dataset, picks[start:start + chunk], warmup_len, H)
        wins.append(win)
        preds.append(predictor.predict(win))
    positions = np.concatenate([w.positions for w in wins])
    win = Window(positions, np.concatenate([w.grasp for w in wins]),
                 np.concatenate([w.displacement for w in wins]), picks, warmup_len)
    return win, np.concatenate(preds)


def max_link_error(pred: np.ndarray, link_length: float) -> float:
    lengths = np.linalg.norm(np.diff(pred, axis=-2), axis=-1)
    return float(np.max(np.abs(lengths - link_length))) if lengths.size else 0.0


def evaluate(predictor, dataset, n_rollouts=DEFAULT_ROLLOUTS, warmup_len=DEFAULT_WARMUP,
             H=DEFAULT_HORIZON, seed=0, split="test") -> RolloutReport:
    win, pred = run_rollouts(predictor, dataset, n_rollouts, warmup_len, H, seed, split)
    errors = rmse(pred, win.truth)
    return RolloutReport(
        steps=np.arange(1, H + 1),
        rmse_mean_mm=errors.mean(axis=0),
        rmse_std_mm=errors.std(axis=0),
        per_rollout=errors,
        warmup=warmup_len,
        n_rollouts=len(errors),
        predictor=predictor.name,
        max_link_error=max_link_error(pred, dataset.manifest.link_length),
    )


RMSE_COLUMNS = ["step", "rmse_mean_mm", "rmse_std_mm"]


def write_rmse_csv(report: RolloutReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RMSE_COLUMNS)
        for row in report.rows():
            w.writerow([row["step"], repr(row["rmse_mean_mm"]), repr(row["rmse_std_mm"])])


# ---------------------------------------------------------------- latency


@dataclass(frozen=True)
class LatencyStats:
    config: str
    mean_ms: float
    std_ms: float
    n: int


def _time_per_step(fn, n_steps: int) -> float:
    t0 = time.perf_counter()
    for _ in range(n_steps):
        fn()
    return (time.perf_counter() - t0) * 1e3 / n_steps


def _stats(config, samples) -> LatencyStats:
    std = statistics.pstdev(samples) if len(samples) > 1 else 0.0
    return LatencyStats(config, statistics.fmean(samples), std, len(samples))


def bench_latency(model: RSSM, n_steps: int = 100, n_repeats: int = 10, warmup_iters: int = 20,
                  config: str = "rssm") -> LatencyStats:
    """Per-step time of one latent step (recurrent step, prior mean, prediction decode).

    Each repeat times ``n_steps`` chained steps on a single rollout; the stats
    are over repeats.  ``warmup_iters`` untimed steps run first.
    """
    if n_steps < 1 or n_repeats < 1:
        raise ProtocolError("n_steps and n_repeats must be at least 1")
    latent = model.initial_state(1)
    a = model.encode_action(np.array([model.L // 2]), np.array([[10.0, -5.0]]))
    state = {"latent": latent}

    def step():
        h = model.recurrent_step(state["latent"], a)
        _, z = model.prior(h)
        model.decode_pred(h, z)
        state["latent"] = LatentState(h, z)

    for _ in range(warmup_iters):
        step()
    return _stats(config, [_time_per_step(step, n_steps) for _ in range(n_repeats)])


def bench_simulator(sim_config, n_steps: int = 5, n_repeats: int = 3, seed: int = 0) -> LatencyStats:
    """Per-action time of the simulator on the same machine, for comparison."""
    from .simulator import init_rope, sample_action, step_action

    rng = np.random.default_rng(seed)
    state = {"rope": init_rope(sim_config, rng)}

    def step():
        state["rope"] = step_action(state["rope"], sample_action(rng, sim_config), sim_config)

    step()  # compile and warm caches
    return _stats("simulator", [_time_per_step(step, n_steps) for _ in range(n_repeats)])


LATENCY_COLUMNS = ["config", "mean_ms", "std_ms", "n"]


def write_latency_csv(stats, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LATENCY_COLUMNS)
        for s in stats:
            w.writerow([s.config, repr(s.mean_ms), repr(s.std_ms), s.n])


# --------------------------------------------------------------- topology


def topology_curve(win: Window, pred: np.ndarray, eps: float, min_crossings: int = 0):
    """Per-step exact Gauss-code match.

    With ``min_crossings > 0`` only rollouts whose ground-truth window has a
    state with at least that many crossings are scored.  Returns the
    aggregate dict and the number of rollouts kept.
    """
    from .topology import aggregate_topology, n_crossings, topology_accuracy

    keep = []
    for b in range(len(pred)):
        if min_crossings <= 0 or max(n_crossings(p, eps) for p in win.positions[b]) >= min_crossings:
            keep.append(b)
    if not keep:
        raise EmptyDataset("no rollouts satisfy the crossing filter")
    scores = [topology_accuracy(pred[b], win.truth[b], eps) for b in keep]
    return aggregate_topology(scores), len(keep)


TOPOLOGY_COLUMNS = ["step", "match_fraction_mean", "match_fraction_std", "ambiguous_fraction"]


def write_topology_csv(agg: dict, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TOPOLOGY_COLUMNS)
        for k in range(len(agg["step"])):
            w.writerow([int(agg["step"][k])] + [repr(float(agg[c][k])) for c in TOPOLOGY_COLUMNS[1:]])


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
