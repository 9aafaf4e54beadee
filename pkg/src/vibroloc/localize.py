"""Event-level localization: feature assembly, analytic baseline, evaluation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .audio_io import EventRecord, MultiChannelClip, ProprioTrace
from .errors import (EmptyInput, GeometryMismatch, MissingModality,
                     NoConfidentPairs)
from .features import (GccSet, gcc_phat_all, mel_spectrogram, pool_matrix,
                       pool_time, refined_lags, tdoa_estimate)
from .geometry import (LABEL_Z_MAX, ContactPoint, CylinderSpec, SensorLayout,
                       chord_distances, decompose_error, wrap_angle)
from .preprocess import (NoiseProfile, NormAccumulator, NormStats,
                         PipelineConfig, peak_index, per_trial_stats,
                         slice_window, spectral_gate)
from .regressor import (GCC_DIM, MEL_DIM, PROP_DIM, ContactRegressor,
                        FeatureTable, loss_targets)
from .simulate import SimConfig


@dataclass(frozen=True)
class ModalityFlags:
    """Which streams to consume and which are hard requirements."""
    use_audio: bool = True
    use_proprio: bool = True
    require_proprio: bool = False


@dataclass
class FeatureVector:
    mel: np.ndarray    # (MEL_DIM,)
    gcc: np.ndarray    # (GCC_DIM,)
    prop: np.ndarray   # (PROP_DIM,)
    mask: np.ndarray   # (3,)


def summarize_proprio(trace: ProprioTrace) -> np.ndarray:
    """Fixed-length (64,) summary of an end-effector trace.

    Resamples to 100 ticks over the trace span, then stacks bucket means of
    velocity and end-relative position, the speed profile, the mean
    approach direction, the peak speed, and the mean orientation.
    """
    t = trace.timestamps
    span = t[-1] - t[0]
    u = (t - t[0]) / span if span > 0 else np.zeros_like(t)
    grid = np.linspace(0.0, 1.0, 100)
    pos = np.stack([np.interp(grid, u, trace.positions[:, i]) for i in range(3)], axis=1)
    vel = np.stack([np.interp(grid, u, trace.velocities[:, i]) for i in range(3)], axis=1)
    quat = np.stack([np.interp(grid, u, trace.orientations[:, i]) for i in range(4)], axis=1)
    W = pool_matrix(100, 8)
    vel_pooled = (W @ vel).reshape(-1)                    # 24
    rel = pos - pos[-1]
    pos_pooled = (W @ rel).reshape(-1)                    # 24
    speed = np.linalg.norm(vel, axis=1)
    speed_pooled = W @ speed                              # 8
    pre = vel[:50].mean(axis=0)
    nrm = np.linalg.norm(pre)
    approach = pre / nrm if nrm > 1e-9 else np.zeros(3)   # 3
    peak = np.array([speed.max()])                        # 1
    quat_mean = quat.mean(axis=0)                         # 4
    out = np.concatenate([vel_pooled, pos_pooled, speed_pooled, approach, peak, quat_mean])
    assert out.shape == (PROP_DIM,)
    return out


class FeatureExtractor:
    """Bundles the fitted front end: gate profile, norm stats, pipeline knobs."""

    def __init__(self, noise_profile: NoiseProfile | None, norm_stats: NormStats | None,
                 config: PipelineConfig = PipelineConfig()):
        if config.apply_gate and noise_profile is None:
            raise GeometryMismatch("gating enabled but no noise profile given")
        self.noise_profile = noise_profile
        self.norm_stats = norm_stats
        self.config = config

    @classmethod
    def from_model(cls, model: ContactRegressor,
                   config: PipelineConfig | None = None) -> "FeatureExtractor":
        return cls(model.noise_profile, model.norm_stats,
                   config if config is not None else model.pipeline)

    def preprocess(self, clip: MultiChannelClip):
        """Gate (optionally) and trim; returns (window clip, gcc source clip).

        The window center comes from the raw pre-gate peak, so gating can
        never move the analysis window.
        """
        cfg = self.config
        work = clip
        if cfg.apply_gate:
            work = spectral_gate(clip, self.noise_profile, cfg.k_sigma,
                                 cfg.floor_db, cfg.smooth_bins)
        center = peak_index(clip)
        trimmed, _ = slice_window(work, center, cfg.window_s)
        if cfg.gcc_on_denoised:
            gcc_src = trimmed
        else:
            gcc_src, _ = slice_window(clip, center, cfg.window_s)
        return trimmed, gcc_src

    def raw_parts(self, event: EventRecord, flags: ModalityFlags = ModalityFlags()):
        """(pooled raw mel (6,50,32), gcc stream (1950,), prop (64,), has_prop, mel spec).

        The gcc stream is the flattened pair-by-lag correlation matrix with
        each pair's confidence-gated refined peak lag appended. "Raw" means
        un-normalized: normalization happens in finalize so the same parts
        can be reused while corpus statistics are still being accumulated.
        """
        if not flags.use_audio:
            raise MissingModality("audio stream is required")
        if flags.require_proprio and event.proprio is None:
            raise MissingModality("event has no proprio trace")
        trimmed, gcc_src = self.preprocess(event.clip)
        spec = mel_spectrogram(trimmed)
        pooled = pool_time(spec.values, self.config.pool_buckets)
        gcc_set = gcc_phat_all(gcc_src, self.config.max_lag)
        gcc = np.concatenate([gcc_set.vectors.reshape(-1), refined_lags(gcc_set)])
        has_prop = flags.use_proprio and event.proprio is not None
        prop = summarize_proprio(event.proprio) if has_prop else np.zeros(PROP_DIM)
        return pooled, gcc, prop, has_prop, spec

    def build_features(self, event: EventRecord,
                       flags: ModalityFlags = ModalityFlags()) -> FeatureVector:
        """Full per-event feature vector using the fitted normalization."""
        pooled, gcc, prop, has_prop, spec = self.raw_parts(event, flags)
        stats = per_trial_stats(spec) if self.config.per_trial_norm else self.norm_stats
        if stats is None:
            raise GeometryMismatch("extractor has no normalization stats")
        if stats.mean.shape[0] != pooled.shape[0]:
            raise GeometryMismatch("stats channel count mismatch")
        mel = (pooled - stats.mean[:, None, None]) / stats.std[:, None, None]
        mask = np.array([1.0, 1.0, 1.0 if has_prop else 0.0])
        return FeatureVector(mel.reshape(-1), gcc.reshape(-1), prop, mask)


@dataclass
class HarvestResult:
    """Un-normalized features for a set of events, plus label bookkeeping."""
    mel_pooled: np.ndarray    # (N, 6, 50, 32)
    gcc: np.ndarray           # (N, GCC_DIM)
    prop: np.ndarray          # (N, PROP_DIM)
    has_prop: np.ndarray      # (N,) bool
    labels: list
    stats: NormStats | None = None


def harvest(events, extractor: FeatureExtractor,
            flags: ModalityFlags = ModalityFlags(),
            fit_stats: bool = False) -> HarvestResult:
    """One preprocessing pass over events; optionally fits NormStats on the fly.

    Statistics are accumulated from the full-resolution spectrograms, not
    the pooled summaries, and normalization is deferred (it commutes with
    the mean-preserving pooling).
    """
    acc = NormAccumulator() if fit_stats else None
    mels, gccs, props, have, labels = [], [], [], [], []
    for event in events:
        pooled, gcc, prop, has_prop, spec = extractor.raw_parts(event, flags)
        if acc is not None:
            acc.add(spec)
        mels.append(pooled.astype(np.float32))
        gccs.append(gcc.reshape(-1).astype(np.float32))
        props.append(prop)
        have.append(has_prop)
        labels.append(event.label)
    if not mels:
        raise EmptyInput("no events harvested")
    return HarvestResult(np.stack(mels), np.stack(gccs), np.stack(props),
                         np.array(have, dtype=bool), labels,
                         acc.finalize() if acc is not None else None)


def finalize_table(raw: HarvestResult, stats: NormStats,
                   use_proprio: bool = True) -> FeatureTable:
    """Normalize harvested features and stack them into a training table."""
    n = raw.mel_pooled.shape[0]
    mel = (raw.mel_pooled.astype(np.float64) - stats.mean[None, :, None, None]) \
        / stats.std[None, :, None, None]
    mask = np.ones((n, 3))
    mask[:, 2] = raw.has_prop.astype(np.float64) if use_proprio else 0.0
    prop = raw.prop * mask[:, 2:3]
    if any(lab is None for lab in raw.labels):
        targets = np.zeros((n, 3))
    else:
        targets = loss_targets(raw.labels)
    return FeatureTable(mel.reshape(n, -1), raw.gcc.astype(np.float64),
                        prop, mask, targets, list(raw.labels))


# ------------------------------------------------------------------
# analytic baseline
# ------------------------------------------------------------------

def required_max_lag(layout: SensorLayout, cyl: CylinderSpec, cfg: SimConfig,
                     sample_rate: int = 44100) -> int:
    """Smallest lag window certain to contain every physical TDOA, in samples."""
    zs = np.linspace(-LABEL_Z_MAX, LABEL_Z_MAX, 21)
    thetas = np.linspace(-math.pi, math.pi, 73)
    worst = 0.0
    for z in zs:
        for th in thetas:
            p = ContactPoint(z, th)
            d = [math.hypot(p.z - s.z, cyl.radius * wrap_angle(p.theta - s.theta))
                 for s in layout.sensors]
            worst = max(worst, max(d) - min(d))
    return int(math.ceil(worst / cfg.wave_speed * sample_rate * 1.05)) + 2


def _delay_grid(layout, cyl, cfg, z_step, theta_step_deg):
    zs = np.arange(-LABEL_Z_MAX, LABEL_Z_MAX + 1e-9, z_step)
    thetas = np.radians(np.arange(-179.0, 181.0, theta_step_deg))
    Z, TH = np.meshgrid(zs, thetas, indexing="ij")
    zf = Z.reshape(-1)
    tf = TH.reshape(-1)
    delays = np.empty((len(layout), zf.shape[0]))
    for i, s in enumerate(layout.sensors):
        dth = np.remainder(tf - s.theta + math.pi, 2.0 * math.pi) - math.pi
        delays[i] = np.sqrt((zf - s.z) ** 2 + (cyl.radius * dth) ** 2) / cfg.wave_speed
    return zf, tf, delays


def multilaterate(gcc: GccSet, layout: SensorLayout, cyl: CylinderSpec,
                  cfg: SimConfig = SimConfig(), sample_rate: int = 44100,
                  z_step: float = 0.002, theta_step_deg: float = 1.0):
    """Grid-search the cylinder surface for the best TDOA fit.

    Uses only the confident correlation peaks; raises NoConfidentPairs when
    fewer than three survive. Ties in the residual prefer smaller |z|, then
    smaller |theta|. Returns (ContactPoint, rms residual in samples).
    """
    if len(layout) != (1 + math.isqrt(1 + 8 * gcc.vectors.shape[0])) // 2:
        # n_pairs = S*(S-1)/2; mismatched layouts produce nonsense TDOAs
        raise GeometryMismatch(
            f"{gcc.vectors.shape[0]} pairs inconsistent with {len(layout)} sensors")
    ests = [tdoa_estimate(v) for v in gcc.vectors]
    keep = [k for k, e in enumerate(ests) if e.confident]
    if len(keep) < 3:
        raise NoConfidentPairs(f"{len(keep)} confident pairs, need >= 3")
    obs = np.array([ests[k].lag_samples for k in keep])
    zf, tf, delays = _delay_grid(layout, cyl, cfg, z_step, theta_step_deg)
    pred = np.stack([(delays[j] - delays[i]) * sample_rate
                     for k in keep for (i, j) in [gcc.pairs[k]]], axis=1)
    scores = kernels.grid_sse(pred, obs)
    order = np.lexsort((np.abs(tf), np.abs(zf), scores))
    best = order[0]
    rms = math.sqrt(scores[best] / obs.shape[0])
    return ContactPoint(float(zf[best]), float(tf[best])), rms


# ------------------------------------------------------------------
# evaluation
# ------------------------------------------------------------------

@dataclass
class EvalReport:
    n: int
    med_m: float
    median_m: float
    q25_m: float
    q75_m: float
    height_mean_m: float
    angle_mean_rad: float
    notes: tuple = ()
    rows: list = field(default_factory=list)

    def to_text(self) -> str:
        s = (f"n={self.n}  MED {self.med_m * 100:.4f} cm  "
             f"median {self.median_m * 100:.4f} cm  "
             f"IQR [{self.q25_m * 100:.4f}, {self.q75_m * 100:.4f}] cm  "
             f"height {self.height_mean_m * 100:.4f} cm  "
             f"angle {math.degrees(self.angle_mean_rad):.4f} deg")
        for note in self.notes:
            s += f"\n  note: {note}"
        return s

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index", "true_z_cm", "true_theta_deg",
                        "pred_z_cm", "pred_theta_deg",
                        "chord_cm", "height_err_cm", "angle_err_deg"])
            for row in self.rows:
                w.writerow(row)


def score_predictions(preds, truths, cyl: CylinderSpec, notes=()) -> EvalReport:
    dist = chord_distances(preds, truths, cyl)
    decomp = [decompose_error(p, t) for p, t in zip(preds, truths)]
    heights = np.array([d[0] for d in decomp])
    angles = np.array([d[1] for d in decomp])
    rows = []
    for i, (p, t) in enumerate(zip(preds, truths)):
        rows.append([i, f"{t.z * 100:.4f}", f"{math.degrees(t.theta):.4f}",
                     f"{p.z * 100:.4f}", f"{math.degrees(p.theta):.4f}",
                     f"{dist[i] * 100:.4f}", f"{heights[i] * 100:.4f}",
                     f"{math.degrees(angles[i]):.4f}"])
    return EvalReport(
        n=len(preds), med_m=float(np.mean(dist)),
        median_m=float(np.median(dist)),
        q25_m=float(np.percentile(dist, 25)), q75_m=float(np.percentile(dist, 75)),
        height_mean_m=float(np.mean(heights)), angle_mean_rad=float(np.mean(angles)),
        notes=tuple(notes), rows=rows)


def evaluate(model: ContactRegressor, events, cyl: CylinderSpec,
             flags: ModalityFlags | None = None,
             extractor: FeatureExtractor | None = None) -> EvalReport:
    """Run the model over labeled events and report error statistics.

    Events missing an optional modality are still evaluated (the mask
    zeroes the absent embedding); a note in the report says how many.
    """
    if flags is None:
        flags = ModalityFlags(use_proprio="prop" in model.modalities)
    ex = extractor if extractor is not None else FeatureExtractor.from_model(model)
    raw = harvest(events, ex, flags)
    if any(lab is None for lab in raw.labels):
        raise EmptyInput("evaluation requires labeled events")
    table = finalize_table(raw, ex.norm_stats, use_proprio=flags.use_proprio)
    preds = model.predict_points(table)
    notes = []
    missing = int((~raw.has_prop).sum())
    if flags.use_proprio and missing:
        notes.append(f"{missing}/{len(raw.labels)} events lacked proprio; "
                     "their embedding was masked to zero")
    return score_predictions(preds, raw.labels, cyl, notes)


# ------------------------------------------------------------------
# training orchestration
# ------------------------------------------------------------------

def train_model(train_events, noise_reference: MultiChannelClip,
                pipeline: PipelineConfig, train_config,
                flags: ModalityFlags = ModalityFlags()) -> ContactRegressor:
    """Fit the front end on the training events, then train the regressor."""
    from .preprocess import fit_noise_profile
    from .regressor import train as train_params
    profile = fit_noise_profile(noise_reference)
    ex = FeatureExtractor(profile, None, pipeline)
    raw = harvest(train_events, ex, flags, fit_stats=True)
    if any(lab is None for lab in raw.labels):
        raise EmptyInput("training requires labeled events")
    table = finalize_table(raw, raw.stats, use_proprio=flags.use_proprio)
    params, history = train_params(table, train_config)
    mods = ("mel", "gcc") + (("prop",) if flags.use_proprio else ())
    return ContactRegressor(params, train_config, raw.stats, profile,
                            pipeline, history=history, modalities=mods)


# ------------------------------------------------------------------
# preprocessing ablation
# ------------------------------------------------------------------

def preprocessing_ablation(model: ContactRegressor, events, cyl: CylinderSpec,
                           variants=("full", "no_gate")) -> list:
    """Evaluate the same model with pipeline stages toggled off.

    Returns [(variant name, EvalReport)] in the order given. The model and
    its statistics stay fixed; only the preprocessing changes, so the rows
    isolate what each stage contributes.
    """
    events = list(events)
    out = []
    for name in variants:
        if name == "full":
            cfg = model.pipeline
        elif name == "no_gate":
            cfg = replace(model.pipeline, apply_gate=False)
        else:
            raise EmptyInput(f"unknown ablation variant {name!r}")
        ex = FeatureExtractor(model.noise_profile if cfg.apply_gate else None,
                              model.norm_stats, cfg)
        out.append((name, evaluate(model, events, cyl, extractor=ex)))
    return out


def ablation_table(rows) -> str:
    lines = [f"{'variant':<12} {'MED cm':>10} {'median cm':>10} "
             f"{'height cm':>10} {'angle deg':>10}"]
    for name, rep in rows:
        lines.append(f"{name:<12} {rep.med_m * 100:>10.4f} {rep.median_m * 100:>10.4f} "
                     f"{rep.height_mean_m * 100:>10.4f} "
                     f"{math.degrees(rep.angle_mean_rad):>10.4f}")
    return "\n".join(lines)
