"""Recurrent state space world model over quaternionic rope states.

Components (all MLPs use ELU hidden layers and a linear output layer):

* state encoder        s_t -> e_t
* action encoder       (grasp index, displacement) -> a_t, via a learned
                       per-link embedding and a displacement MLP, fused
* recurrent model      GRU over [z_{t-1}, a_{t-1}] with state h_{t-1}
* prior / posterior    diagonal Gaussians from h_t / [h_t, e_t]
* two decoders         reconstruction of s_t from (h_t, z_t) and prediction
                       of s_{t+1} from (h_{t+1}, prior sample at t+1)

Batched tensors are ``(B, features)``.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import struct
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, CorruptCheckpoint, EmptyDataset, InvalidGrasp, ShapeError
from .quatchain import state_dim

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DLOC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Hyperparams:
    d_embed: int = 256
    d_action: int = 256
    d_rnn: int = 128
    d_z: int = 16
    d_hidden: int = 128
    link_embed_dim: int = 32
    mlp_depth: int = 2
    min_std: float = 0.1
    beta: float = 1.0
    free_nats: float = 0.0
    lr: float = 1e-4
    batch_size: int = 32
    seq_len: int = 20
    max_epochs: int = 200
    patience: int = 10
    grad_clip: float = 100.0
    position_scale: float = 1.0
    val_stride: int = 5

    def __post_init__(self):
        for f in ("d_embed", "d_action", "d_rnn", "d_z", "d_hidden", "link_embed_dim", "batch_size", "val_stride"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be at least 1")
        if self.mlp_depth < 0 or self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("mlp_depth, max_epochs and patience out of range")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be at least 2")
        if not self.min_std > 0 or self.beta < 0 or self.free_nats < 0:
            raise ConfigError("need min_std > 0, beta >= 0, free_nats >= 0")
        if not self.position_scale > 0 or not self.lr > 0:
            raise ConfigError("position_scale and lr must be positive")

    @classmethod
    def preset(cls, name: str, **overrides) -> "Hyperparams":
        widths = PRESETS.get(name)
        if widths is None:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        keys = ("d_embed", "d_action", "d_rnn", "d_z", "d_hidden")
        return replace(cls(**dict(zip(keys, widths))), **overrides)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown hyperparameter keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# (d_embed, d_action, d_rnn, d_z, d_hidden)
PRESETS = {
    "small": (1024, 1024, 512, 64, 512),
    "medium": (1024, 1024, 512, 64, 1024),
    "large": (2048, 512, 1024, 64, 2048),
    "desk": (256, 256, 128, 16, 128),
}


class Gaussian(NamedTuple):
    mean: Tensor
    std: Tensor


class LatentState(NamedTuple):
    h: Tensor
    z: Tensor
    dist: Gaussian | None = None


class LossTerms(NamedTuple):
    total: Tensor
    recon: Tensor
    pred: Tensor
    kl: Tensor

    def values(self) -> dict:
        return {
            "L_total": float(self.total.data),
            "L_recon": float(self.recon.data),
            "L_pred": float(self.pred.data),
            "L_KL": float(self.kl.data),
        }


def _mlp_shapes(prefix, d_in, d_hidden, d_out, depth):
    dims = [d_in] + [d_hidden] * depth + [d_out]
    out = []
    for k in range(len(dims) - 1):
        out.append((f"{prefix}.w{k}", (dims[k], dims[k + 1])))
        out.append((f"{prefix}.b{k}", (dims[k + 1],)))
    return out


def parameter_shapes(hp: Hyperparams, L: int) -> list:
    """Ordered ``(name, shape)`` list; this order is also the checkpoint blob order."""
    D = state_dim(L)
    dh, dep = hp.d_hidden, hp.mlp_depth
    d_rnn, d_z = hp.d_rnn, hp.d_z
    gru_in = d_z + hp.d_action + d_rnn
    return (
        _mlp_shapes("state_enc", D, dh, hp.d_embed, dep)
        + [("action_enc.embed", (L, hp.link_embed_dim))]
        + _mlp_shapes("action_enc.disp", 2, dh, dh, dep)
        + _mlp_shapes("action_enc.fuse", hp.link_embed_dim + dh, dh, hp.d_action, dep)
        + [
            ("gru.w_ru", (gru_in, 2 * d_rnn)),
            ("gru.b_ru", (2 * d_rnn,)),
            ("gru.w_n", (gru_in, d_rnn)),
            ("gru.b_n", (d_rnn,)),
        ]
        + _mlp_shapes("prior", d_rnn, dh, 2 * d_z, dep)
        + _mlp_shapes("posterior", d_rnn + hp.d_embed, dh, 2 * d_z, dep)
        + _mlp_shapes("recon_dec", d_rnn + d_z, dh, D, dep)
        + _mlp_shapes("pred_dec", d_rnn + d_z, dh, D, dep)
    )


def parameter_count(hp: Hyperparams, L: int) -> int:
    return int(sum(np.prod(s) for _, s in parameter_shapes(hp, L)))


def init_params(hp: Hyperparams, L: int, rng: np.random.Generator) -> "OrderedDict[str, Tensor]":
    params = OrderedDict()
    for name, shape in parameter_shapes(hp, L):
        if name.endswith("embed"):
            data = rng.standard_normal(shape)
        elif len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(np.float32), requires_grad=True, name=name)
    return params


class RSSM:
    """Parameters plus the forward pieces of the world model."""

    def __init__(self, hp: Hyperparams, L: int, link_length: float, params=None, seed: int = 0):
        if L < 2:
            raise ConfigError("L must be at least 2")
        self.hp = hp
        self.L = int(L)
        self.link_length = float(link_length)
        self.params = params if params is not None else init_params(hp, L, np.random.default_rng(seed))
        expected = parameter_shapes(hp, L)
        if [(n, tuple(p.shape)) for n, p in self.params.items()] != [(n, tuple(s)) for n, s in expected]:
            raise ShapeError("parameter set does not match the hyperparameters")
        self.dim = state_dim(L)
        self.scale_vec = np.ones(self.dim, dtype=np.float32)
        self.scale_vec[:3] = hp.position_scale
        log.debug("RSSM with %d parameters", self.n_params)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def clone(self) -> "RSSM":
        params = OrderedDict((n, Tensor(p.data.copy(), requires_grad=True, name=n)) for n, p in self.params.items())
        return RSSM(self.hp, self.L, self.link_length, params)

    def zero_params(self):
        for p in self.params.values():
            p.data = np.zeros_like(p.data)

    # ---------------------------------------------------------------- pieces

    def _mlp(self, prefix, x):
        depth = self.hp.mlp_depth
        P = self.params
        for k in range(depth):
            x = ad.elu(ad.linear(x, P[f"{prefix}.w{k}"], P[f"{prefix}.b{k}"]))
        return ad.linear(x, P[f"{prefix}.w{depth}"], P[f"{prefix}.b{depth}"])

    def to_model_space(self, states: np.ndarray) -> np.ndarray:
        """Flattened chain vectors as the network sees them (position block scaled)."""
        return (np.asarray(states, dtype=np.float32) * self.scale_vec).astype(np.float32)

    def from_model_space(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) / self.scale_vec.astype(np.float64)

    def encode_state(self, s) -> Tensor:
        s = ad.as_tensor(s)
        if s.shape[-1] != self.dim:
            raise ShapeError(f"state vector length {s.shape[-1]} != {self.dim}")
        return self._mlp("state_enc", s)

    def encode_action(self, grasp, displacement) -> Tensor:
        grasp = np.atleast_1d(np.asarray(grasp, dtype=np.int64))
        if np.any(grasp < 0) or np.any(grasp >= self.L):
            raise InvalidGrasp(f"grasp index outside [0, {self.L})")
        disp = np.asarray(displacement, dtype=np.float32).reshape(len(grasp), 2) * self.hp.position_scale
        emb = ad.embedding_lookup(self.params["action_enc.embed"], grasp)
        d = self._mlp("action_enc.disp", Tensor(disp.astype(np.float32)))
        return self._mlp("action_enc.fuse", ad.concat([emb, d]))

    def gru_weights(self) -> ad.GRUWeights:
        P = self.params
        return ad.GRUWeights(P["gru.w_ru"], P["gru.b_ru"], P["gru.w_n"], P["gru.b_n"])

    def recurrent_step(self, prev: LatentState, a: Tensor) -> Tensor:
        return ad.gru_cell(ad.concat([prev.z, a]), prev.h, self.gru_weights())

    def _gaussian(self, out: Tensor) -> Gaussian:
        dz = self.hp.d_z
        mean = out[:, :dz]
        raw = out[:, dz:]
        floor = Tensor(np.full(raw.shape, self.hp.min_std, dtype=raw.data.dtype))
        return Gaussian(mean, ad.add(ad.softplus(raw), floor))

    def prior(self, h: Tensor, noise=None):
        g = self._gaussian(self._mlp("prior", h))
        return g, self._sample(g, noise)

    def posterior(self, h: Tensor, e: Tensor, noise=None):
        g = self._gaussian(self._mlp("posterior", ad.concat([h, e])))
        return g, self._sample(g, noise)

    def _sample(self, g: Gaussian, noise):
        if noise is None:
            return g.mean
        return ad.reparameterize(g.mean, g.std, noise)

    def decode_recon(self, h: Tensor, z: Tensor) -> Tensor:
        return self._mlp("recon_dec", ad.concat([h, z]))

    def decode_pred(self, h: Tensor, z: Tensor) -> Tensor:
        return self._mlp("pred_dec", ad.concat([h, z]))

    def initial_state(self, B: int) -> LatentState:
        dtype = next(iter(self.params.values())).data.dtype
        return LatentState(Tensor(np.zeros((B, self.hp.d_rnn), dtype)), Tensor(np.zeros((B, self.hp.d_z), dtype)))


# ------------------------------------------------------------------- loss


def make_noise(rng: np.random.Generator, hp: Hyperparams, B: int, n: int) -> np.ndarray:
    """Frozen standard-normal draws ``(2, n-1, B, d_z)``: posterior then prior."""
    return rng.standard_normal((2, n - 1, B, hp.d_z)).astype(np.float32)


def sequence_loss(model: RSSM, states, grasp, displacement, noise=None) -> LossTerms:
    """Composite loss over a batch of windows.

    ``states`` is ``(B, n, D)`` in model space, ``grasp`` ``(B, n-1)``,
    ``displacement`` ``(B, n-1, 2)``.  ``noise=None`` uses distribution means.
    """
    states = np.asarray(states)
    B, n, D = states.shape
    if n < 2:
        raise ShapeError("sequence_loss needs windows of at least two states")
    if D != model.dim or grasp.shape != (B, n - 1) or displacement.shape != (B, n - 1, 2):
        raise ShapeError(f"batch shapes {states.shape}, {grasp.shape}, {displacement.shape} do not fit the model")
    dtype = next(iter(model.params.values())).data.dtype
    hp = model.hp
    steps = n - 1

    # time-major stacks so each step is a contiguous row block
    s_tm = np.ascontiguousarray(states.transpose(1, 0, 2), dtype=dtype)
    e_all = model.encode_state(Tensor(s_tm[:steps].reshape(steps * B, D)))
    a_all = model.encode_action(grasp.T.reshape(-1), displacement.transpose(1, 0, 2).reshape(-1, 2))

    state = model.initial_state(B)
    prior_g, _ = model.prior(state.h)
    hs, zs, hs_next, zs_next, kls = [], [], [], [], []
    for t in range(steps):
        rows = slice(t * B, (t + 1) * B)
        post_g, z = model.posterior(state.h, e_all[rows], None if noise is None else noise[0, t])
        kl_t = ad.mean(ad.gaussian_kl(post_g.mean, post_g.std, prior_g.mean, prior_g.std))
        if hp.free_nats > 0:
            kl_t = ad.floor_at(kl_t, hp.free_nats)
        kls.append(kl_t)
        hs.append(state.h)
        zs.append(z)
        h_next = model.recurrent_step(LatentState(state.h, z), a_all[rows])
        prior_g, z_hat = model.prior(h_next, None if noise is None else noise[1, t])
        hs_next.append(h_next)
        zs_next.append(z_hat)
        state = LatentState(h_next, z_hat)

    recon = model.decode_recon(ad.concat(hs, axis=0), ad.concat(zs, axis=0))
    pred = model.decode_pred(ad.concat(hs_next, axis=0), ad.concat(zs_next, axis=0))
    l_recon = ad.mean_squared_error(recon, Tensor(s_tm[:steps].reshape(steps * B, D)))
    l_pred = ad.mean_squared_error(pred, Tensor(s_tm[1:].reshape(steps * B, D)))
    l_kl = ad.scale(_sum_all(kls), 1.0 / steps)
    total = ad.add(ad.add(l_recon, l_pred), ad.scale(l_kl, hp.beta))
    return LossTerms(total, l_recon, l_pred, l_kl)


def _sum_all(terms):
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def batch_loss(model: RSSM, batch, noise=None) -> LossTerms:
    return sequence_loss(model, model.to_model_space(batch.states), batch.grasp, batch.displacement, noise)


# --------------------------------------------------------------- training


@dataclass
class TrainResult:
    history: list
    model: RSSM  # best-validation parameters
    best_epoch: int
    best_val: float
    epochs_run: int
    stopped_early: bool
    checkpoint: str | None = None


def seed_streams(seed: int, n: int = 4):
    """Independent generators derived from one seed (SeedSequence spawning)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def batches_per_epoch(n_train_traj: int, T: int, hp: Hyperparams) -> int:
    """Enough windows that every training transition is visited once in expectation."""
    return max(1, math.ceil(n_train_traj * T / (hp.batch_size * (hp.seq_len - 1))))


def validation_windows(dataset, hp: Hyperparams) -> np.ndarray:
    win = dataset.windows("val", hp.seq_len)
    return win[win[:, 1] % hp.val_stride == 0]


def evaluate_loss(model: RSSM, dataset, windows: np.ndarray, hp: Hyperparams) -> dict:
    """Mean-noise loss averaged over ``windows`` (weighted by batch size)."""
    totals = {"L_total": 0.0, "L_recon": 0.0, "L_pred": 0.0, "L_KL": 0.0}
    for start in range(0, len(windows), hp.batch_size):
        picks = windows[start:start + hp.batch_size]
        vals = batch_loss(model, dataset.make_batch(picks, hp.seq_len)).values()
        for k in totals:
            totals[k] += vals[k] * len(picks)
    return {k: v / len(windows) for k, v in totals.items()}


LOG_COLUMNS = ["epoch", "L_total", "L_recon", "L_pred", "L_KL", "val_L_total", "wall_seconds"]


def train(dataset, hp: Hyperparams, seed: int = 0, out_dir=None, max_batches: int | None = None) -> TrainResult:
    """Adam training with best-validation checkpointing and early stopping.

    ``dataset`` is a :class:`~dlolab.dataset.SequenceDataset` with splits.
    Writes ``train_log.csv`` and ``best.ckpt`` under ``out_dir`` if given.
    """
    if not dataset.manifest.split.get("train"):
        raise EmptyDataset("training split is empty")
    if not dataset.manifest.split.get("val"):
        raise EmptyDataset("validation split is empty")
    init_rng, batch_rng, noise_rng = seed_streams(seed, 3)
    model = RSSM(hp, dataset.L, dataset.manifest.link_length, init_params(hp, dataset.L, init_rng))
    params = list(model.params.values())
    opt = ad.Adam(params, lr=hp.lr)
    n_batches = batches_per_epoch(len(dataset.manifest.split["train"]), dataset.manifest.T, hp)
    if max_batches is not None:
        n_batches = min(n_batches, max_batches)
    val_win = validation_windows(dataset, hp)
    if len(val_win) == 0:
        raise EmptyDataset("no validation windows")

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(LOG_COLUMNS)

    history = []
    best_val, best_epoch, best_model = math.inf, 0, None
    since_best = 0
    t0 = time.perf_counter()
    stopped = False
    epoch = 0
    try:
        for epoch in range(1, hp.max_epochs + 1):
            sums = np.zeros(4)
            for _ in range(n_batches):
                batch = dataset.sample_batch("train", hp.batch_size, hp.seq_len, batch_rng)
                noise = make_noise(noise_rng, hp, hp.batch_size, hp.seq_len)
                with Tape() as tape:
                    terms = batch_loss(model, batch, noise)
                grads = tape.backward(terms.total, params)
                grads, _ = ad.clip_by_global_norm(grads, hp.grad_clip)
                opt.step(grads)
                sums += [float(t.data) for t in terms]
            train_vals = sums / n_batches
            val = evaluate_loss(model, dataset, val_win, hp)["L_total"]
            row = {
                "epoch": epoch,
                "L_total": float(train_vals[0]),
                "L_recon": float(train_vals[1]),
                "L_pred": float(train_vals[2]),
                "L_KL": float(train_vals[3]),
                "val_L_total": float(val),
                "wall_seconds": time.perf_counter() - t0,
            }
            history.append(row)
            if writer is not None:
                writer.writerow([row[c] if c == "epoch" else repr(row[c]) for c in LOG_COLUMNS])
                log_file.flush()
            log.info("epoch %d train %.5g val %.5g", epoch, row["L_total"], val)
            if val < best_val:
                best_val, best_epoch, since_best = val, epoch, 0
                best_model = model.clone()
                if out is not None:
                    save_checkpoint(best_model, out / "best.ckpt")
            else:
                since_best += 1
                if since_best > hp.patience:
                    stopped = True
                    break
    finally:
        if writer is not None:
            log_file.close()
    ckpt = str(out / "best.ckpt") if out is not None else None
    return TrainResult(history, best_model, best_epoch, best_val, epoch, stopped, ckpt)


# ------------------------------------------------------------- checkpoints


def save_checkpoint(model: RSSM, path) -> None:
    """Single file: magic, u32 header length, JSON header, little-endian f32 blob.

    The blob concatenates parameters in :func:`parameter_shapes` order, each
    row-major.
    """
    header = {
        "version": CHECKPOINT_VERSION,
        "L": model.L,
        "link_length": model.link_length,
        "hyperparams": model.hp.to_dict(),
        "parameters": [[n, list(p.shape)] for n, p in model.params.items()],
        "n_params": model.n_params,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in model.params.values())
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + blob)


def read_checkpoint_header(path) -> dict:
    buf = Path(path).read_bytes()
    return _parse_header(buf)[0]


def _parse_header(buf: bytes):
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("not a checkpoint file")
    (hlen,) = struct.unpack("<I", buf[4:8])
    try:
        header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"bad header: {exc}") from None
    return header, 8 + hlen


def load_checkpoint(path, expect_L: int | None = None) -> RSSM:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpoint(f"cannot read {path}: {exc}") from exc
    header, off = _parse_header(buf)
    if header.get("version") != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {header.get('version')}")
    L = int(header["L"])
    if expect_L is not None and L != expect_L:
        raise CorruptCheckpoint(f"checkpoint is for L={L}, data has L={expect_L}")
    hp = Hyperparams.from_dict(header["hyperparams"])
    shapes = parameter_shapes(hp, L)
    if [[n, list(s)] for n, s in shapes] != header["parameters"]:
        raise CorruptCheckpoint("parameter layout does not match hyperparameters")
    expected = 4 * sum(int(np.prod(s)) for _, s in shapes)
    if len(buf) - off != expected:
        raise CorruptCheckpoint(f"weight blob has {len(buf) - off} bytes, expected {expected}")
    params = OrderedDict()
    for name, shape in shapes:
        count = int(np.prod(shape))
        data = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
        params[name] = Tensor(data, requires_grad=True, name=name)
    return RSSM(hp, L, header["link_length"], params)


def with_dtype(model: RSSM, dtype) -> RSSM:
    """Copy of ``model`` whose parameters are cast to ``dtype`` (e.g. float64 for checks)."""
    params = OrderedDict(
        (n, Tensor(np.array(p.data, dtype=dtype), requires_grad=True, name=n)) for n, p in model.params.items()
    )
    m = copy.copy(model)
    m.params = params
    return m
