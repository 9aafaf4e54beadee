"""Clip, trace, and event containers plus on-disk formats.

WAV handling is deliberately hand-rolled: the stdlib wave module cannot read
IEEE-float WAVs, and the loader here must distinguish structural problems
(NotWav), stream mismatches (ChannelMismatch/RateMismatch), and short reads
(TruncatedData) at the byte level.

Disk layout of a dataset directory:
    manifest_<split>.jsonl   one JSON object per event
    clips/<id>.wav           float32 WAV, 6 channels, 44100 Hz
    proprio/<id>.npz         end-effector trace (optional per event)
    noise_reference.wav      strike-free clip used to fit the noise gate
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (ChannelMismatch, EmptyInput, InvalidClip, IoFailure,
                     MalformedRecord, NotWav, RateMismatch, TruncatedData)
from .geometry import ContactPoint

SAMPLE_RATE = 44100
N_CHANNELS = 6

# manifest labels are stored in centimeters; everything internal is meters
_LABEL_Z_CM_MAX = 10.0


@dataclass
class MultiChannelClip:
    """Six equal-length sample sequences from the microphone array."""
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 2:
            raise InvalidClip(f"samples must be (channels, n), got ndim={arr.ndim}")
        if arr.shape[0] != N_CHANNELS:
            raise InvalidClip(f"expected {N_CHANNELS} channels, got {arr.shape[0]}")
        if arr.shape[1] == 0:
            raise InvalidClip("zero-length channels")
        if not np.isfinite(arr).all():
            raise InvalidClip("non-finite samples")
        if self.sample_rate <= 0:
            raise InvalidClip(f"bad sample rate {self.sample_rate}")
        self.samples = arr
        self.sample_rate = int(self.sample_rate)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass
class ProprioTrace:
    """End-effector kinematics over the event window.

    timestamps are seconds relative to the clip window start and must be
    strictly increasing; orientations are unit quaternions (w, x, y, z).
    """
    timestamps: np.ndarray
    positions: np.ndarray
    orientations: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        p = np.asarray(self.positions, dtype=np.float64)
        q = np.asarray(self.orientations, dtype=np.float64)
        v = np.asarray(self.velocities, dtype=np.float64)
        n = t.shape[0]
        if n == 0:
            raise EmptyInput("empty trace")
        if p.shape != (n, 3) or v.shape != (n, 3) or q.shape != (n, 4):
            raise ValueError(f"inconsistent trace shapes: t{t.shape} p{p.shape} q{q.shape} v{v.shape}")
        if not (np.isfinite(t).all() and np.isfinite(p).all()
                and np.isfinite(q).all() and np.isfinite(v).all()):
            raise ValueError("non-finite trace values")
        if n > 1 and not (np.diff(t) > 0).all():
            raise ValueError("timestamps must be strictly increasing")
        norms = np.linalg.norm(q, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("orientations must be unit quaternions")
        self.timestamps, self.positions, self.orientations, self.velocities = t, p, q, v

    def __len__(self):
        return self.timestamps.shape[0]


@dataclass
class EventRecord:
    """One contact event: audio, optional proprioception, optional label."""
    clip: MultiChannelClip
    proprio: ProprioTrace | None = None
    label: ContactPoint | None = None
    metadata: dict = field(default_factory=dict)


# ------------------------------------------------------------------
# WAV container
# ------------------------------------------------------------------

_FMT_PCM = 1
_FMT_FLOAT = 3


def write_clip(clip: MultiChannelClip, path) -> None:
    """Write a clip as a 6-channel IEEE float32 WAV."""
    interleaved = np.ascontiguousarray(clip.samples.T, dtype="<f4")
    payload = interleaved.tobytes()
    ch = clip.samples.shape[0]
    rate = clip.sample_rate
    block = 4 * ch
    fmt = struct.pack("<HHIIHH", _FMT_FLOAT, ch, rate, rate * block, block, 32)
    fact = struct.pack("<I", clip.n_samples)
    body = (b"fmt " + struct.pack("<I", len(fmt)) + fmt
            + b"fact" + struct.pack("<I", len(fact)) + fact
            + b"data" + struct.pack("<I", len(payload)) + payload)
    try:
        with open(path, "wb") as f:
            f.write(b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body)
    except OSError as e:
        raise IoFailure(str(e)) from e


def _parse_wav(raw: bytes, path):
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise NotWav(f"{path}: not a RIFF/WAVE file")
    fmt = None
    data = None
    off = 12
    while off + 8 <= len(raw):
        cid = raw[off:off + 4]
        (csize,) = struct.unpack_from("<I", raw, off + 4)
        body_off = off + 8
        if cid == b"fmt " and fmt is None:
            if body_off + 16 > len(raw):
                raise TruncatedData(f"{path}: fmt chunk truncated")
            fmt = struct.unpack_from("<HHIIHH", raw, body_off)
        elif cid == b"data" and data is None:
            avail = len(raw) - body_off
            if csize > avail:
                raise TruncatedData(f"{path}: data chunk declares {csize} bytes, {avail} present")
            data = raw[body_off:body_off + csize]
        off = body_off + csize + (csize & 1)
    if fmt is None:
        raise NotWav(f"{path}: missing fmt chunk")
    if data is None:
        raise TruncatedData(f"{path}: missing data chunk")
    return fmt, data


def read_clip(path, expect_channels: int = N_CHANNELS,
              expect_rate: int = SAMPLE_RATE) -> MultiChannelClip:
    """Read a PCM16 or IEEE-float32 WAV into a clip.

    PCM16 samples are scaled to [-1, 1) by 1/32768; float samples pass
    through unchanged.
    """
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoFailure(str(e)) from e
    (tag, channels, rate, _byte_rate, block, bits), data = _parse_wav(raw, path)
    if channels != expect_channels:
        raise ChannelMismatch(f"{path}: {channels} channels, expected {expect_channels}")
    if rate != expect_rate:
        raise RateMismatch(f"{path}: {rate} Hz, expected {expect_rate}")
    if tag == _FMT_PCM and bits == 16:
        width = 2
        decode = lambda b: np.frombuffer(b, dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _FMT_FLOAT and bits == 32:
        width = 4
        decode = lambda b: np.frombuffer(b, dtype="<f4").astype(np.float64)
    else:
        raise InvalidClip(f"{path}: unsupported encoding (tag={tag}, bits={bits})")
    frame = width * channels
    if len(data) % frame != 0:
        raise TruncatedData(f"{path}: data size {len(data)} not a whole number of frames")
    flat = decode(data)
    return MultiChannelClip(flat.reshape(-1, channels).T, sample_rate=rate)


# ------------------------------------------------------------------
# proprio traces (npz)
# ------------------------------------------------------------------

def save_proprio(trace: ProprioTrace, path) -> None:
    try:
        np.savez(path, timestamps=trace.timestamps, positions=trace.positions,
                 orientations=trace.orientations, velocities=trace.velocities)
    except OSError as e:
        raise IoFailure(str(e)) from e


def load_proprio(path) -> ProprioTrace:
    try:
        with np.load(path) as z:
            fields = {k: z[k] for k in ("timestamps", "positions", "orientations", "velocities")}
    except OSError as e:
        raise IoFailure(str(e)) from e
    except KeyError as e:
        raise MalformedRecord(f"{path}: missing field {e}") from None
    try:
        return ProprioTrace(**fields)
    except (ValueError, EmptyInput) as e:
        raise MalformedRecord(f"{path}: {e}") from None


# ------------------------------------------------------------------
# JSONL manifests
# ------------------------------------------------------------------

@dataclass
class ManifestEntry:
    clip_path: str
    proprio_path: str | None = None
    z_cm: float | None = None
    theta_rad: float | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def label(self) -> ContactPoint | None:
        if self.z_cm is None:
            return None
        return ContactPoint(self.z_cm / 100.0, self.theta_rad)


def _validate_entry(obj: dict, where: str) -> ManifestEntry:
    if not isinstance(obj, dict):
        raise MalformedRecord(f"{where}: record is not an object")
    clip = obj.get("clip")
    if not isinstance(clip, str) or not clip:
        raise MalformedRecord(f"{where}: missing clip path")
    proprio = obj.get("proprio")
    if proprio is not None and not isinstance(proprio, str):
        raise MalformedRecord(f"{where}: proprio must be a path or null")
    z_cm = obj.get("z_cm")
    theta = obj.get("theta_rad")
    if (z_cm is None) != (theta is None):
        raise MalformedRecord(f"{where}: z_cm and theta_rad must both be present or both null")
    if z_cm is not None:
        if not isinstance(z_cm, (int, float)) or not isinstance(theta, (int, float)):
            raise MalformedRecord(f"{where}: label fields must be numbers")
        if not (math.isfinite(z_cm) and math.isfinite(theta)):
            raise MalformedRecord(f"{where}: non-finite label")
        if abs(z_cm) > _LABEL_Z_CM_MAX:
            raise MalformedRecord(f"{where}: z_cm {z_cm} outside [-10, 10]")
        if not (-math.pi <= theta <= math.pi):
            raise MalformedRecord(f"{where}: theta_rad {theta} outside [-pi, pi]")
    meta = obj.get("meta", {})
    if not isinstance(meta, dict):
        raise MalformedRecord(f"{where}: meta must be an object")
    return ManifestEntry(clip, proprio, z_cm, theta, dict(meta))


def load_manifest(path) -> list:
    """Parse a JSONL manifest; raises MalformedRecord with the failing line number."""
    entries = []
    try:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as e:
                    raise MalformedRecord(f"{path}:{lineno}: {e}") from None
                entries.append(_validate_entry(obj, f"{path}:{lineno}"))
    except OSError as e:
        raise IoFailure(str(e)) from e
    return entries


def write_manifest(entries, path) -> None:
    try:
        with open(path, "w") as f:
            for e in entries:
                obj = {"clip": e.clip_path, "proprio": e.proprio_path,
                       "z_cm": e.z_cm, "theta_rad": e.theta_rad, "meta": e.metadata}
                f.write(json.dumps(obj) + "\n")
    except OSError as e:
        raise IoFailure(str(e)) from e


def resolve_entry(entry: ManifestEntry, base_dir) -> EventRecord:
    """Load the files a manifest entry points at and assemble the event."""
    clip = read_clip(os.path.join(base_dir, entry.clip_path))
    proprio = None
    if entry.proprio_path is not None:
        proprio = load_proprio(os.path.join(base_dir, entry.proprio_path))
    return EventRecord(clip=clip, proprio=proprio, label=entry.label,
                       metadata=dict(entry.metadata))


def iter_events(manifest_path, base_dir=None):
    """Yield (entry, event) pairs for every record in a manifest."""
    base = base_dir if base_dir is not None else os.path.dirname(os.path.abspath(manifest_path))
    for entry in load_manifest(manifest_path):
        yield entry, resolve_entry(entry, base)
