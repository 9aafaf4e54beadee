"""Cylinder-surface geometry, sensor layout, and evaluation metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (DegenerateAxisPoint, EmptyInput, GeometryMismatch,
                     IoFailure, LengthMismatch, MalformedRecord, ShapeMismatch)

TWO_PI = 2.0 * math.pi

# contact labels live on the instrumented band, not the full tube
LABEL_Z_MAX = 0.10


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi], the seam angle mapping to +pi.

    Identity for angles already inside the interval, so wrapping is
    idempotent and exact there.
    """
    if -math.pi < theta <= math.pi:
        return theta
    if not math.isfinite(theta):
        raise ValueError(f"non-finite angle {theta!r}")
    w = math.remainder(theta, TWO_PI)
    if w <= -math.pi:
        w = math.pi
    return w


@dataclass(frozen=True)
class ContactPoint:
    """A point on the cylinder surface: height z (m) and azimuth theta (rad).

    theta is canonicalized to (-pi, pi] at construction.
    """
    z: float
    theta: float

    def __post_init__(self):
        if not (math.isfinite(self.z) and math.isfinite(self.theta)):
            raise ValueError(f"non-finite contact point ({self.z!r}, {self.theta!r})")
        object.__setattr__(self, "z", float(self.z))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))


def _identity3() -> np.ndarray:
    return np.eye(3)


def _zero3() -> np.ndarray:
    return np.zeros(3)


@dataclass(eq=False)
class CylinderSpec:
    """End-effector geometry plus its rigid pose in the world frame."""
    radius: float = 0.1016
    half_length: float = 0.1524
    rotation: np.ndarray = field(default_factory=_identity3)
    translation: np.ndarray = field(default_factory=_zero3)

    def __post_init__(self):
        if self.radius <= 0 or self.half_length <= 0:
            raise ValueError("radius and half_length must be positive")
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def with_pose(self, rotation=None, translation=None) -> "CylinderSpec":
        return CylinderSpec(
            radius=self.radius,
            half_length=self.half_length,
            rotation=self.rotation if rotation is None else rotation,
            translation=self.translation if translation is None else translation,
        )

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def to_frame(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - self.translation) @ self.rotation


@dataclass(frozen=True)
class SensorLayout:
    """Surface positions of the contact microphones, as ContactPoints."""
    sensors: tuple

    def __post_init__(self):
        if len(self.sensors) == 0:
            raise EmptyInput("sensor layout has no sensors")
        for s in self.sensors:
            if not isinstance(s, ContactPoint):
                raise GeometryMismatch("layout entries must be ContactPoint")
        if len({(s.z, s.theta) for s in self.sensors}) != len(self.sensors):
            raise ShapeMismatch("duplicate sensor positions")

    def __len__(self):
        return len(self.sensors)


def default_layout() -> SensorLayout:
    """Two rings of three microphones near the tube ends, rings clocked 60 deg apart."""
    lower = [ContactPoint(-0.13, math.radians(a)) for a in (0.0, 120.0, 240.0)]
    upper = [ContactPoint(+0.13, math.radians(a)) for a in (60.0, 180.0, 300.0)]
    return SensorLayout(tuple(lower + upper))


def to_cartesian(p: ContactPoint, cyl: CylinderSpec) -> np.ndarray:
    """Cylinder-frame xyz of a surface point."""
    return np.array([cyl.radius * math.cos(p.theta),
                     cyl.radius * math.sin(p.theta),
                     p.z])


def project_to_surface(xyz, cyl: CylinderSpec) -> ContactPoint:
    """Project a cylinder-frame point radially onto the lateral surface.

    Raises DegenerateAxisPoint when the point sits on the axis (azimuth
    undefined). z is clamped to the physical tube extent.
    """
    x, y, z = (float(v) for v in np.asarray(xyz, dtype=np.float64).reshape(3))
    if math.hypot(x, y) < 1e-9:
        raise DegenerateAxisPoint(f"point ({x}, {y}, {z}) lies on the cylinder axis")
    theta = math.atan2(y, x)
    z = min(max(z, -cyl.half_length), cyl.half_length)
    return ContactPoint(z, theta)


def label_from_intersections(points, cyl: CylinderSpec) -> ContactPoint:
    """Collapse a set of cylinder-frame intersection points to one surface label."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise EmptyInput("no intersection points")
    pts = pts.reshape(-1, 3)
    return project_to_surface(pts.mean(axis=0), cyl)


def geodesic_distance(a: ContactPoint, b: ContactPoint, cyl: CylinderSpec) -> float:
    """On-surface (unrolled) distance between two surface points."""
    dtheta = wrap_angle(a.theta - b.theta)
    return math.hypot(a.z - b.z, cyl.radius * dtheta)


def chord_distances(preds, truths, cyl: CylinderSpec) -> np.ndarray:
    """Straight-line 3D distance between paired surface points."""
    if len(preds) != len(truths):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(truths)} labels")
    if len(preds) == 0:
        raise EmptyInput("no prediction/label pairs")
    pa = np.stack([to_cartesian(p, cyl) for p in preds])
    pb = np.stack([to_cartesian(t, cyl) for t in truths])
    return np.linalg.norm(pa - pb, axis=1)


def med(preds, truths, cyl: CylinderSpec) -> float:
    """Mean Euclidean (chord) distance between paired predictions and labels, meters."""
    return float(np.mean(chord_distances(preds, truths, cyl)))


def decompose_error(pred: ContactPoint, truth: ContactPoint) -> tuple:
    """(|height error| m, |azimuth error| rad)."""
    return abs(pred.z - truth.z), abs(wrap_angle(pred.theta - truth.theta))


@dataclass
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeMismatch(f"point cloud must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ShapeMismatch("point cloud contains non-finite coordinates")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]


def chamfer_rms(pred: PointCloud, target: PointCloud) -> float:
    """Unidirectional RMS chamfer distance from pred points to target points.

    Asymmetric by construction: every pred point finds its nearest target
    point; uncovered target regions are not penalized.
    """
    if len(pred) == 0 or len(target) == 0:
        raise EmptyInput("chamfer requires non-empty clouds")
    sq = kernels.min_sqdist(pred.points, target.points)
    return float(np.sqrt(np.mean(sq)))


def save_xyz(cloud: PointCloud, path) -> None:
    """Write a point cloud as ASCII 'x y z' lines."""
    with open(path, "w") as f:
        for x, y, z in cloud.points:
            f.write(f"{x:.17g} {y:.17g} {z:.17g}\n")


def load_xyz(path) -> PointCloud:
    rows = []
    try:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 3:
                    raise MalformedRecord(f"{path}:{lineno}: expected 3 fields")
                try:
                    rows.append([float(v) for v in parts])
                except ValueError as e:
                    raise MalformedRecord(f"{path}:{lineno}: {e}") from None
    except OSError as e:
        raise IoFailure(str(e)) from e
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))
