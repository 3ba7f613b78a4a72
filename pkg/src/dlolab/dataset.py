"""On-disk trajectory datasets, splits and training batches.

Layout of a dataset directory::

    manifest.json        UTF-8 JSON, see DatasetManifest
    traj_000000.bin      one binary record per trajectory

Record (little-endian)::

    magic  b"DLO1"
    u32    L
    u32    T
    f32    link length
    f32    states[(T+1) * L * 3]           row-major (t, point, xyz)
    T x    (u32 grasp_index, f32 dx, f32 dy)
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import CorruptDataset, EmptyDataset, FormatError, IoError, WindowTooLong
from .quatchain import encode_positions, state_dim
from .simulator import Trajectory

MAGIC = b"DLO1"
FORMAT_VERSION = 1
HEADER = np.dtype([("magic", "S4"), ("L", "<u4"), ("T", "<u4"), ("link_length", "<f4")])
ACTION = np.dtype([("grasp", "<u4"), ("dx", "<f4"), ("dy", "<f4")])
MANIFEST = "manifest.json"


@dataclass
class DatasetManifest:
    L: int
    link_length: float
    T: int
    n_trajectories: int
    base_seed: int
    format_version: int = FORMAT_VERSION
    split: dict = field(default_factory=dict)  # {"train": [...], "val": [...], "test": [...]}
    sim_config: dict = field(default_factory=dict)

    @property
    def n_transitions(self) -> int:
        return self.n_trajectories * self.T

    @property
    def n_states(self) -> int:
        return self.n_trajectories * (self.T + 1)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        try:
            return cls(**d)
        except TypeError as exc:
            raise CorruptDataset(f"bad manifest: {exc}") from None


def record_name(k: int) -> str:
    return f"traj_{k:06d}.bin"


def record_size(L: int, T: int) -> int:
    return HEADER.itemsize + 4 * (T + 1) * L * 3 + ACTION.itemsize * T


def encode_record(traj: Trajectory, link_length: float) -> bytes:
    header = np.array([(MAGIC, traj.L, traj.T, link_length)], dtype=HEADER)
    states = np.ascontiguousarray(traj.states, dtype="<f4")
    actions = np.empty(traj.T, dtype=ACTION)
    actions["grasp"] = traj.grasp
    actions["dx"] = traj.displacement[:, 0]
    actions["dy"] = traj.displacement[:, 1]
    return header.tobytes() + states.tobytes() + actions.tobytes()


def decode_record(buf: bytes, seed: int, manifest: DatasetManifest | None = None) -> Trajectory:
    if len(buf) < HEADER.itemsize:
        raise CorruptDataset("record shorter than its header")
    header = np.frombuffer(buf, dtype=HEADER, count=1)[0]
    if bytes(header["magic"]) != MAGIC:
        raise FormatError(f"bad magic {bytes(header['magic'])!r}")
    L, T = int(header["L"]), int(header["T"])
    if manifest is not None and (L != manifest.L or T != manifest.T):
        raise CorruptDataset(f"record is L={L}, T={T}; manifest says L={manifest.L}, T={manifest.T}")
    if len(buf) != record_size(L, T):
        raise CorruptDataset(f"record has {len(buf)} bytes, expected {record_size(L, T)}")
    off = HEADER.itemsize
    n_states = (T + 1) * L * 3
    states = np.frombuffer(buf, dtype="<f4", count=n_states, offset=off).reshape(T + 1, L, 3)
    actions = np.frombuffer(buf, dtype=ACTION, count=T, offset=off + 4 * n_states)
    disp = np.stack([actions["dx"], actions["dy"]], axis=-1).astype(np.float64)
    return Trajectory(states.astype(np.float64), actions["grasp"].astype(np.int64), disp.reshape(T, 2), seed)


def quantize(traj: Trajectory) -> Trajectory:
    """The trajectory exactly as it reads back from disk."""
    return Trajectory(
        traj.states.astype(np.float32).astype(np.float64),
        traj.grasp.copy(),
        traj.displacement.astype(np.float32).astype(np.float64),
        traj.seed,
    )


def save_dataset(trajectories, manifest: DatasetManifest, path) -> None:
    path = Path(path)
    if len(trajectories) != manifest.n_trajectories:
        raise CorruptDataset(f"{len(trajectories)} trajectories but manifest says {manifest.n_trajectories}")
    try:
        path.mkdir(parents=True, exist_ok=True)
        for k, traj in enumerate(trajectories):
            if traj.L != manifest.L or traj.T != manifest.T:
                raise CorruptDataset(f"trajectory {k} has L={traj.L}, T={traj.T}")
            (path / record_name(k)).write_bytes(encode_record(traj, manifest.link_length))
        (path / MANIFEST).write_text(manifest.to_json() + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write dataset to {path}: {exc}") from exc


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = (path / MANIFEST).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path / MANIFEST}: {exc}") from exc
    try:
        return DatasetManifest.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not JSON: {exc}") from None


def load_dataset(path):
    path = Path(path)
    manifest = load_manifest(path)
    if manifest.format_version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {manifest.format_version}")
    trajectories = []
    for k in range(manifest.n_trajectories):
        try:
            buf = (path / record_name(k)).read_bytes()
        except FileNotFoundError:
            raise CorruptDataset(f"missing record {record_name(k)}") from None
        except OSError as exc:
            raise IoError(str(exc)) from exc
        trajectories.append(decode_record(buf, manifest.base_seed + k, manifest))
    return manifest, trajectories


def split(manifest: DatasetManifest, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetManifest:
    """Deterministic shuffled split; val/test sizes are floored, train gets the rest."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = manifest.n_trajectories
    order = np.random.default_rng(seed).permutation(n).tolist()
    n_val = math.floor(n * fractions[1] + 1e-9)
    n_test = math.floor(n * fractions[2] + 1e-9)
    n_train = n - n_val - n_test
    parts = {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train:n_train + n_val]),
        "test": sorted(order[n_train + n_val:]),
    }
    return replace(manifest, split=parts)


@dataclass(frozen=True, eq=False)
class Batch:
    states: np.ndarray  # (B, n, 3 + 4(L-1)) float32
    grasp: np.ndarray  # (B, n-1) int64
    displacement: np.ndarray  # (B, n-1, 2) float32
    index: np.ndarray  # (B, 2) trajectory id and start offset

    @property
    def B(self) -> int:
        return self.states.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[1]


class SequenceDataset:
    """Trajectories plus their cached chain encodings."""

    def __init__(self, manifest: DatasetManifest, trajectories):
        self.manifest = manifest
        self.trajectories = list(trajectories)
        self._chain = {}

    @classmethod
    def load(cls, path) -> "SequenceDataset":
        return cls(*load_dataset(path))

    @property
    def L(self) -> int:
        return self.manifest.L

    @property
    def dim(self) -> int:
        return state_dim(self.manifest.L)

    def chain(self, k: int) -> np.ndarray:
        """Flattened chain vectors ``(T+1, 3 + 4(L-1))`` of trajectory ``k`` (float64)."""
        v = self._chain.get(k)
        if v is None:
            v = self._chain[k] = encode_positions(self.trajectories[k].states)
        return v

    def indices(self, name: str):
        idx = self.manifest.split.get(name, [])
        if not idx:
            raise EmptyDataset(f"split {name!r} is empty")
        return idx

    def windows(self, name: str, n: int) -> np.ndarray:
        T = self.manifest.T
        if n > T + 1:
            raise WindowTooLong(f"window of {n} states exceeds trajectory length {T + 1}")
        idx = self.indices(name)
        starts = np.arange(T + 2 - n)
        return np.array([(k, o) for k in idx for o in starts], dtype=np.int64)

    def make_batch(self, picks: np.ndarray, n: int) -> Batch:
        states = np.empty((len(picks), n, self.dim), dtype=np.float32)
        grasp = np.empty((len(picks), n - 1), dtype=np.int64)
        disp = np.empty((len(picks), n - 1, 2), dtype=np.float32)
        for b, (k, o) in enumerate(picks):
            traj = self.trajectories[k]
            states[b] = self.chain(k)[o:o + n]
            grasp[b] = traj.grasp[o:o + n - 1]
            disp[b] = traj.displacement[o:o + n - 1]
        return Batch(states, grasp, disp, np.asarray(picks, dtype=np.int64))

    def sample_batch(self, name: str, B: int, n: int, rng: np.random.Generator) -> Batch:
        win = self.windows(name, n)
        return self.make_batch(win[rng.integers(len(win), size=B)], n)


def sample_batch(dataset: SequenceDataset, split_name: str, B: int, n: int, rng) -> Batch:
    return dataset.sample_batch(split_name, B, n, rng)
