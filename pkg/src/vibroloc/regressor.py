"""From-scratch contact regressor: three encoder stacks, analytic backprop, Adam.

The network maps (mel summary, correlation block, proprio summary) to
(sin theta, cos theta, z / 0.1). Each modality has its own affine+tanh
stack ending in an embedding that is multiplied by that modality's
availability mask, so an absent stream contributes a zero embedding
instead of garbage.

Angle targets are snapped to a 2^-36-turn grid (~9e-11 rad) before the
sin/cos encoding. That makes the loss exactly invariant to label angles
offset by full turns: wrapping theta + 2*pi lands within ~1e-15 rad of
theta, and the snap collapses both onto the same grid point, so the loss
matches bit for bit. The snap is far below every physical tolerance and is
applied only here, never to geometry.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, asdict, field, replace

import numpy as np

from .errors import EmptyInput, IoFailure, MalformedRecord, ShapeMismatch
from .geometry import ContactPoint, wrap_angle
from .preprocess import (NoiseProfile, NormStats, PipelineConfig,
                         load_noise_profile, load_norm_stats,
                         load_pipeline_config, save_noise_profile,
                         save_norm_stats, save_pipeline_config)

MEL_DIM = 9600          # 6 channels x 50 mels x 32 time buckets
GCC_DIM = 1950          # 15 pairs x (129 lags + 1 refined peak lag)
PROP_DIM = 64
Z_SCALE = 0.10

_MODALITIES = ("mel", "gcc", "prop")
_DIMS = {"mel": MEL_DIM, "gcc": GCC_DIM, "prop": PROP_DIM}

_SNAP_UNITS = float(2 ** 36)
_TWO_PI = 2.0 * math.pi


def snap_angle(theta: float) -> float:
    """Round a wrapped angle onto the 2^-36-turn grid."""
    k = round(wrap_angle(theta) / _TWO_PI * _SNAP_UNITS)
    return k * _TWO_PI / _SNAP_UNITS


def loss_target(label: ContactPoint) -> np.ndarray:
    tq = snap_angle(label.theta)
    return np.array([math.sin(tq), math.cos(tq), label.z / Z_SCALE])


def loss_targets(labels) -> np.ndarray:
    if len(labels) == 0:
        raise EmptyInput("no labels")
    return np.stack([loss_target(p) for p in labels])


def loss(pred, label: ContactPoint) -> float:
    """Per-event training loss: mean squared error over the 3 targets."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    if pred.shape != (3,):
        raise ShapeMismatch(f"prediction shape {pred.shape}")
    r = pred - loss_target(label)
    return float(np.dot(r, r) / 3.0)


def prediction_to_point(vec) -> ContactPoint:
    """Decode a (sin, cos, z/0.1) output row into a surface point."""
    s, c, zn = (float(v) for v in np.asarray(vec).reshape(3))
    theta = math.atan2(s, c)
    z = min(max(zn, -1.0), 1.0) * Z_SCALE
    return ContactPoint(z, theta)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    lr_decay_every: int = 50
    lr_decay_factor: float = 0.5
    val_fraction: float = 0.1
    augment: bool = True
    hidden: int = 128
    audio_embed: int = 64
    proprio_embed: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ShapeMismatch("bad training config")


@dataclass
class FeatureTable:
    """Stacked per-event features ready for batching."""
    mel: np.ndarray      # (N, MEL_DIM)
    gcc: np.ndarray      # (N, GCC_DIM)
    prop: np.ndarray     # (N, PROP_DIM)
    mask: np.ndarray     # (N, 3) in {0, 1}
    targets: np.ndarray  # (N, 3)
    labels: list = field(default_factory=list)

    def __post_init__(self):
        n = self.mel.shape[0]
        shapes = {"mel": (n, MEL_DIM), "gcc": (n, GCC_DIM), "prop": (n, PROP_DIM),
                  "mask": (n, 3), "targets": (n, 3)}
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise ShapeMismatch(f"{name}: {got} != {want}")

    def __len__(self):
        return self.mel.shape[0]

    def subset(self, idx) -> "FeatureTable":
        return FeatureTable(self.mel[idx], self.gcc[idx], self.prop[idx],
                            self.mask[idx], self.targets[idx],
                            [self.labels[i] for i in idx] if self.labels else [])


def _emb_dim(cfg: TrainConfig, mod: str) -> int:
    return cfg.proprio_embed if mod == "prop" else cfg.audio_embed


def init_params(cfg: TrainConfig, seed=None) -> dict:
    """Weight dict; every matrix is float64, biases start at zero."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}

    def dense(name, n_in, n_out):
        params[f"{name}_W"] = rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out))
        params[f"{name}_b"] = np.zeros(n_out)

    for mod in _MODALITIES:
        dense(f"{mod}0", _DIMS[mod], cfg.hidden)
        dense(f"{mod}1", cfg.hidden, cfg.hidden)
        dense(f"{mod}2", cfg.hidden, _emb_dim(cfg, mod))
    concat = 2 * cfg.audio_embed + cfg.proprio_embed
    dense("head0", concat, cfg.hidden)
    dense("head1", cfg.hidden, 3)
    return params


def forward(params: dict, mel, gcc, prop, mask):
    """Batch forward pass; returns (output (B,3), cache for backward)."""
    xs = {"mel": mel, "gcc": gcc, "prop": prop}
    cache = {"mask": mask, "inputs": xs}
    embs = []
    for col, mod in enumerate(_MODALITIES):
        h0 = np.tanh(xs[mod] @ params[f"{mod}0_W"] + params[f"{mod}0_b"])
        h1 = np.tanh(h0 @ params[f"{mod}1_W"] + params[f"{mod}1_b"])
        e = np.tanh(h1 @ params[f"{mod}2_W"] + params[f"{mod}2_b"])
        em = e * mask[:, col:col + 1]
        cache[mod] = (h0, h1, e)
        embs.append(em)
    z = np.concatenate(embs, axis=1)
    h = np.tanh(z @ params["head0_W"] + params["head0_b"])
    out = h @ params["head1_W"] + params["head1_b"]
    cache["z"] = z
    cache["h"] = h
    return out, cache


def backward(params: dict, cache: dict, d_out) -> dict:
    """Analytic gradients of a scalar loss with upstream gradient d_out."""
    grads = {}
    h = cache["h"]
    z = cache["z"]
    mask = cache["mask"]
    grads["head1_W"] = h.T @ d_out
    grads["head1_b"] = d_out.sum(axis=0)
    dh = (d_out @ params["head1_W"].T) * (1.0 - h * h)
    grads["head0_W"] = z.T @ dh
    grads["head0_b"] = dh.sum(axis=0)
    dz = dh @ params["head0_W"].T
    off = 0
    for col, mod in enumerate(_MODALITIES):
        h0, h1, e = cache[mod]
        width = e.shape[1]
        de = dz[:, off:off + width] * mask[:, col:col + 1]
        off += width
        de = de * (1.0 - e * e)
        grads[f"{mod}2_W"] = h1.T @ de
        grads[f"{mod}2_b"] = de.sum(axis=0)
        dh1 = (de @ params[f"{mod}2_W"].T) * (1.0 - h1 * h1)
        grads[f"{mod}1_W"] = h0.T @ dh1
        grads[f"{mod}1_b"] = dh1.sum(axis=0)
        dh0 = (dh1 @ params[f"{mod}1_W"].T) * (1.0 - h0 * h0)
        x = cache["inputs"][mod]
        grads[f"{mod}0_W"] = x.T @ dh0
        grads[f"{mod}0_b"] = dh0.sum(axis=0)
    return grads


def batch_loss_and_grads(params: dict, table: FeatureTable, idx=None):
    """Mean loss over the (sub)batch and gradients for every parameter."""
    t = table if idx is None else table.subset(idx)
    out, cache = forward(params, t.mel, t.gcc, t.prop, t.mask)
    r = out - t.targets
    n = out.shape[0]
    value = float(np.sum(r * r) / (3.0 * n))
    grads = backward(params, cache, (2.0 / (3.0 * n)) * r)
    return value, grads


def batch_loss(params: dict, table: FeatureTable) -> float:
    out, _ = forward(params, table.mel, table.gcc, table.prop, table.mask)
    r = out - table.targets
    return float(np.sum(r * r) / (3.0 * out.shape[0]))


def gradient_check(params: dict, table: FeatureTable, n_probes: int = 500,
                   seed: int = 0, eps: float = 1e-5) -> list:
    """Central finite-difference probes of random parameters.

    Returns (param name, flat index, relative error) per probe, where the
    relative error guards its denominator at 1e-8.
    """
    rng = np.random.default_rng(seed)
    _, grads = batch_loss_and_grads(params, table)
    keys = sorted(params.keys())
    results = []
    for _ in range(n_probes):
        key = keys[int(rng.integers(len(keys)))]
        flat = params[key].reshape(-1)
        j = int(rng.integers(flat.shape[0]))
        orig = flat[j]
        flat[j] = orig + eps
        up = batch_loss(params, table)
        flat[j] = orig - eps
        down = batch_loss(params, table)
        flat[j] = orig
        numeric = (up - down) / (2.0 * eps)
        analytic = float(grads[key].reshape(-1)[j])
        rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-8)
        results.append((key, j, rel))
    return results


class AdamState:
    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float,
             beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.t += 1
        b1c = 1.0 - beta1 ** self.t
        b2c = 1.0 - beta2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * (g * g)
            params[k] -= lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + eps)


def _augment_pooled(mel_flat: np.ndarray, rng) -> np.ndarray:
    """Training-time jitter on the pooled mel block: roll + coin-gated masks."""
    v = mel_flat.reshape(6, 50, 32).copy()
    shift = int(rng.integers(-3, 4))
    if shift:
        v = np.roll(v, shift, axis=2)
    if rng.random() < 0.5:
        t0 = int(rng.integers(0, 32))
        tw = int(rng.integers(1, 3))
        v[:, :, t0:t0 + tw] = 0.0
    if rng.random() < 0.5:
        f0 = int(rng.integers(0, 50))
        fw = int(rng.integers(1, 7))
        v[:, f0:f0 + fw, :] = 0.0
    return v.reshape(-1)


def train(table: FeatureTable, cfg: TrainConfig):
    """Mini-batch Adam training with step-decayed learning rate.

    Splits off a validation fraction, tracks the best validation loss, and
    returns (best params, history) where history rows are
    (epoch, train loss, val loss). Fully deterministic in cfg.seed.
    """
    n = len(table)
    if n < 2:
        raise EmptyInput(f"need at least 2 events to train, got {n}")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg)
    opt = AdamState(params)
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * cfg.val_fraction)))
    val = table.subset(perm[:n_val])
    tr_idx = perm[n_val:]
    if tr_idx.shape[0] == 0:
        raise EmptyInput("validation fraction leaves no training data")
    history = []
    best = None
    best_val = math.inf
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * (cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every))
        order = rng.permutation(tr_idx.shape[0])
        losses = []
        for b0 in range(0, order.shape[0], cfg.batch_size):
            idx = tr_idx[order[b0:b0 + cfg.batch_size]]
            batch = table.subset(idx)
            if cfg.augment:
                mel = batch.mel.astype(np.float64, copy=True)
                for r in range(mel.shape[0]):
                    mel[r] = _augment_pooled(mel[r], rng)
                batch = FeatureTable(mel, batch.gcc, batch.prop, batch.mask,
                                     batch.targets, batch.labels)
            value, grads = batch_loss_and_grads(params, batch)
            opt.step(params, grads, lr)
            losses.append(value)
        val_loss = batch_loss(params, val)
        history.append((epoch, float(np.mean(losses)), val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best = {k: v.copy() for k, v in params.items()}
    return best, history


# ------------------------------------------------------------------
# model bundle
# ------------------------------------------------------------------

class ContactRegressor:
    """Trained weights plus everything needed to reproduce the front end."""

    def __init__(self, params: dict, train_config: TrainConfig,
                 norm_stats: NormStats, noise_profile: NoiseProfile,
                 pipeline: PipelineConfig, history=None, modalities=None):
        self.params = params
        self.train_config = train_config
        self.norm_stats = norm_stats
        self.noise_profile = noise_profile
        self.pipeline = pipeline
        self.history = list(history or [])
        # which modalities the model was trained to consume
        self.modalities = tuple(modalities or ("mel", "gcc", "prop"))

    def predict_batch(self, table: FeatureTable) -> np.ndarray:
        out, _ = forward(self.params, table.mel, table.gcc, table.prop, table.mask)
        return out

    def predict_points(self, table: FeatureTable) -> list:
        return [prediction_to_point(row) for row in self.predict_batch(table)]

    def save(self, out_dir) -> None:
        """Write the bundle: weights.npz + versioned sidecars + loss log."""
        try:
            os.makedirs(out_dir, exist_ok=True)
            np.savez(os.path.join(out_dir, "weights.npz"),
                     **{k: v for k, v in self.params.items()})
            with open(os.path.join(out_dir, "model.json"), "w") as f:
                json.dump({"format_version": 1, "kind": "contact_regressor",
                           "train_config": asdict(self.train_config),
                           "modalities": list(self.modalities)}, f, indent=2)
            with open(os.path.join(out_dir, "history.csv"), "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["epoch", "train_loss", "val_loss"])
                for row in self.history:
                    w.writerow([row[0], f"{row[1]:.8f}", f"{row[2]:.8f}"])
        except OSError as e:
            raise IoFailure(str(e)) from e
        save_norm_stats(self.norm_stats, os.path.join(out_dir, "norm_stats.json"))
        save_noise_profile(self.noise_profile, os.path.join(out_dir, "noise_profile.json"))
        save_pipeline_config(self.pipeline, os.path.join(out_dir, "pipeline.json"))

    @classmethod
    def load(cls, out_dir) -> "ContactRegressor":
        try:
            with np.load(os.path.join(out_dir, "weights.npz")) as z:
                params = {k: z[k] for k in z.files}
            with open(os.path.join(out_dir, "model.json")) as f:
                meta = json.load(f)
        except OSError as e:
            raise IoFailure(str(e)) from e
        if meta.get("kind") != "contact_regressor":
            raise MalformedRecord(f"{out_dir}: not a model bundle")
        try:
            tc = TrainConfig(**meta["train_config"])
            mods = tuple(meta.get("modalities", ("mel", "gcc", "prop")))
        except (KeyError, TypeError) as e:
            raise MalformedRecord(f"{out_dir}: {e}") from None
        history = []
        hpath = os.path.join(out_dir, "history.csv")
        if os.path.exists(hpath):
            with open(hpath) as f:
                for i, row in enumerate(csv.reader(f)):
                    if i == 0:
                        continue
                    history.append((int(row[0]), float(row[1]), float(row[2])))
        return cls(params, tc,
                   load_norm_stats(os.path.join(out_dir, "norm_stats.json")),
                   load_noise_profile(os.path.join(out_dir, "noise_profile.json")),
                   load_pipeline_config(os.path.join(out_dir, "pipeline.json")),
                   history=history, modalities=mods)
