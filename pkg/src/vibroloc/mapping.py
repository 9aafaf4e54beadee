"""Blind tactile mapping: sweep the instrumented cylinder through a scene of
capsule branches, localize each contact acoustically, accumulate a point map.

The end-effector is treated as a capsule of the same radius and half-length
(contacts land on the instrumented lateral band, so the flat caps never
matter), which makes every clearance and contact query an exact
segment-segment distance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, NoValidPoses, PlanInvalid
from .geometry import (LABEL_Z_MAX, ContactPoint, CylinderSpec, PointCloud,
                       SensorLayout, default_layout, to_cartesian)
from .localize import FeatureExtractor, ModalityFlags, finalize_table, harvest
from .regressor import ContactRegressor
from .simulate import (ModalProfile, SimConfig, StrikeSpec,
                       make_rod_profiles, synth_event)


@dataclass(frozen=True)
class Capsule:
    """A branch segment: the swept sphere between p0 and p1."""
    p0: tuple
    p1: tuple
    radius: float
    profile: ModalProfile

    def __post_init__(self):
        a = np.asarray(self.p0, dtype=np.float64)
        b = np.asarray(self.p1, dtype=np.float64)
        if a.shape != (3,) or b.shape != (3,):
            raise PlanInvalid("capsule endpoints must be 3-vectors")
        if self.radius <= 0:
            raise PlanInvalid("capsule radius must be positive")
        if float(np.linalg.norm(b - a)) < 1e-9:
            raise PlanInvalid("degenerate capsule (zero length)")
        object.__setattr__(self, "p0", tuple(float(v) for v in a))
        object.__setattr__(self, "p1", tuple(float(v) for v in b))


@dataclass(frozen=True)
class BranchScene:
    segments: tuple

    def __post_init__(self):
        if len(self.segments) == 0:
            raise EmptyInput("scene has no segments")


def default_scene(seed: int = 0) -> BranchScene:
    """Three-segment branch: a long main limb with two angled offshoots."""
    rods = make_rod_profiles(3, [seed, 777], (620.0, 1180.0), "branch")
    return BranchScene((
        Capsule((-0.30, 0.02, 0.010), (0.35, -0.02, 0.035), 0.020, rods[0]),
        Capsule((-0.05, 0.00, 0.020), (0.25, -0.12, 0.090), 0.018, rods[1]),
        Capsule((0.05, -0.01, 0.025), (-0.15, 0.12, 0.080), 0.018, rods[2]),
    ))


def seg_seg_closest(p1, q1, p2, q2):
    """Closest points between segments [p1,q1] and [p2,q2].

    Returns (distance, point on first, point on second). Standard clamped
    quadratic minimization.
    """
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = float(d1 @ d1)
    e = float(d2 @ d2)
    f = float(d2 @ r)
    if a <= 1e-18 and e <= 1e-18:
        s = t = 0.0
    elif a <= 1e-18:
        s = 0.0
        t = min(max(f / e, 0.0), 1.0)
    else:
        c = float(d1 @ r)
        if e <= 1e-18:
            t = 0.0
            s = min(max(-c / a, 0.0), 1.0)
        else:
            b = float(d1 @ d2)
            denom = a * e - b * b
            s = min(max((b * f - c * e) / denom, 0.0), 1.0) if denom > 1e-18 else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t = 0.0
                s = min(max(-c / a, 0.0), 1.0)
            elif t > 1.0:
                t = 1.0
                s = min(max((b - c) / a, 0.0), 1.0)
    c1 = p1 + s * d1
    c2 = p2 + t * d2
    return float(np.linalg.norm(c1 - c2)), c1, c2


def surface_points(scene: BranchScene, resolution: float = 0.001) -> PointCloud:
    """Sample every capsule surface (lateral walls and end caps) at ~resolution."""
    pts = []
    for seg in scene.segments:
        a = np.asarray(seg.p0)
        b = np.asarray(seg.p1)
        axis = b - a
        length = float(np.linalg.norm(axis))
        axis = axis / length
        # orthonormal frame around the axis
        helper = np.array([1.0, 0.0, 0.0])
        if abs(axis @ helper) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        u = np.cross(axis, helper)
        u /= np.linalg.norm(u)
        w = np.cross(axis, u)
        n_ax = max(2, int(math.ceil(length / resolution)) + 1)
        n_circ = max(8, int(math.ceil(2.0 * math.pi * seg.radius / resolution)))
        phis = 2.0 * math.pi * np.arange(n_circ) / n_circ
        ring = seg.radius * (np.outer(np.cos(phis), u) + np.outer(np.sin(phis), w))
        for i in range(n_ax):
            center = a + axis * (length * i / (n_ax - 1))
            pts.append(center + ring)
        n_lat = max(2, int(math.ceil(0.5 * math.pi * seg.radius / resolution)))
        for center, sign in ((a, -1.0), (b, 1.0)):
            for j in range(1, n_lat + 1):
                beta = 0.5 * math.pi * j / n_lat
                rr = seg.radius * math.cos(beta)
                h = seg.radius * math.sin(beta) * sign
                circ = max(4, int(math.ceil(2.0 * math.pi * rr / resolution))) if rr > 1e-6 else 1
                ph = 2.0 * math.pi * np.arange(circ) / circ
                cap = center + h * axis + rr * (np.outer(np.cos(ph), u) + np.outer(np.sin(ph), w))
                pts.append(cap)
    return PointCloud(np.vstack(pts))


@dataclass(frozen=True)
class StrikePose:
    position: tuple        # cylinder center at sweep start (world)
    direction: tuple       # unit sweep direction, one of +-x / +-y
    speed: float


@dataclass(frozen=True)
class StrikePlan:
    poses: tuple
    max_travel: float = 0.8

    def __post_init__(self):
        if len(self.poses) == 0:
            raise EmptyInput("empty strike plan")


_PLAN_DIRECTIONS = (np.array([1.0, 0.0, 0.0]), np.array([-1.0, 0.0, 0.0]),
                    np.array([0.0, 1.0, 0.0]), np.array([0.0, -1.0, 0.0]))


def _axis_endpoints(center: np.ndarray, cyl: CylinderSpec):
    off = np.array([0.0, 0.0, cyl.half_length])
    return center - off, center + off


def _scene_clearance(center: np.ndarray, scene: BranchScene, cyl: CylinderSpec) -> float:
    a0, a1 = _axis_endpoints(center, cyl)
    best = math.inf
    for seg in scene.segments:
        d, _, _ = seg_seg_closest(a0, a1, np.asarray(seg.p0), np.asarray(seg.p1))
        best = min(best, d - cyl.radius - seg.radius)
    return best


def plan_strikes(scene: BranchScene, cyl: CylinderSpec, count: int, seed,
                 plane_y: float = -0.30, x_range=(-0.35, 0.40),
                 z_range=(-0.05, 0.12), speed_range=(1.2, 2.8),
                 min_clearance: float = 0.01, max_travel: float = 0.8) -> StrikePlan:
    """Sample collision-free start poses in the y=plane_y plane.

    Directions are restricted to the four axis directions of the plane
    (+-x, +-y); the vertical tube sweeps straight until contact or
    max_travel. Raises NoValidPoses if the region is too cluttered.
    """
    if count < 1:
        raise PlanInvalid(f"count {count} < 1")
    rng = np.random.default_rng(seed)
    poses = []
    attempts = 0
    limit = max(200, count * 200)
    while len(poses) < count:
        attempts += 1
        if attempts > limit:
            raise NoValidPoses(f"{len(poses)}/{count} poses after {attempts} attempts")
        center = np.array([rng.uniform(*x_range), plane_y, rng.uniform(*z_range)])
        if _scene_clearance(center, scene, cyl) < min_clearance:
            continue
        d = _PLAN_DIRECTIONS[int(rng.integers(4))]
        poses.append(StrikePose(tuple(center), tuple(d),
                                float(rng.uniform(*speed_range))))
    return StrikePlan(tuple(poses), max_travel)


def sweep_to_contact(pose: StrikePose, scene: BranchScene, cyl: CylinderSpec,
                     max_travel: float, step: float = 0.002,
                     tol: float = 1e-9):
    """March the pose along its direction to the first capsule contact.

    Returns (travel distance, segment index, world contact point,
    cylinder center at contact) or None
    when no contact occurs within max_travel. The contact point lies on
    both surfaces to within tol (bisection on the separation function).
    """
    start = np.asarray(pose.position)
    d = np.asarray(pose.direction)

    def separation(t):
        center = start + t * d
        a0, a1 = _axis_endpoints(center, cyl)
        best = math.inf
        best_k = -1
        for k, seg in enumerate(scene.segments):
            dist, _, _ = seg_seg_closest(a0, a1, np.asarray(seg.p0), np.asarray(seg.p1))
            gap = dist - cyl.radius - seg.radius
            if gap < best:
                best = gap
                best_k = k
        return best, best_k

    prev_t = 0.0
    prev_gap, _ = separation(0.0)
    if prev_gap <= 0.0:
        return None  # planner should have excluded this pose
    t = step
    hit_t = None
    while t <= max_travel + step:
        gap, _ = separation(min(t, max_travel))
        if gap <= 0.0:
            hit_t = min(t, max_travel)
            break
        if t >= max_travel:
            return None
        prev_t, prev_gap = min(t, max_travel), gap
        t += step
    if hit_t is None:
        return None
    lo, hi = prev_t, hit_t
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        gap, _ = separation(mid)
        if gap <= 0.0:
            hi = mid
        else:
            lo = mid
    t_star = hi
    center = start + t_star * d
    a0, a1 = _axis_endpoints(center, cyl)
    best = math.inf
    best_k = -1
    best_pts = None
    for k, seg in enumerate(scene.segments):
        dist, c_axis, c_seg = seg_seg_closest(a0, a1, np.asarray(seg.p0), np.asarray(seg.p1))
        gap = dist - cyl.radius - seg.radius
        if gap < best:
            best, best_k, best_pts = gap, k, (dist, c_axis, c_seg)
    dist, c_axis, c_seg = best_pts
    n = (c_seg - c_axis) / dist
    contact_world = c_axis + n * cyl.radius
    return float(t_star), best_k, contact_world, center


@dataclass
class MappingResult:
    predicted: PointCloud
    truth: PointCloud
    pair_distances: np.ndarray
    attempted: int
    contacts: int
    misses: int
    rejected: int
    out_of_band: int
    notes: tuple = ()


def execute_mapping(plan: StrikePlan, scene: BranchScene, model: ContactRegressor,
                    sim_cfg: SimConfig, threshold: float, seed,
                    layout: SensorLayout | None = None,
                    cyl: CylinderSpec | None = None) -> MappingResult:
    """Run every planned strike, localize accepted contacts, build the map.

    A contact event is accepted when the peak amplitude of its denoised
    analysis window clears the threshold; rejected events leave no point.
    Misses (no contact within max_travel) are counted but synthesize no
    audio, like a real sweep through empty air.
    """
    layout = layout if layout is not None else default_layout()
    cyl = cyl if cyl is not None else CylinderSpec()
    ex = FeatureExtractor.from_model(model)
    flags = ModalityFlags(use_proprio="prop" in model.modalities)
    preds_world = []
    truths_world = []
    pair_d = []
    misses = rejected = out_of_band = contacts = 0
    for i, pose in enumerate(plan.poses):
        hit = sweep_to_contact(pose, scene, cyl, plan.max_travel)
        if hit is None:
            misses += 1
            continue
        _, seg_idx, contact_world, center = hit
        local = contact_world - center
        z = float(local[2])
        if abs(z) > LABEL_Z_MAX:
            out_of_band += 1
            continue
        contacts += 1
        cp = ContactPoint(z, math.atan2(local[1], local[0]))
        strike = StrikeSpec(cp, pose.speed, pose.direction,
                            scene.segments[seg_idx].profile)
        event = synth_event(strike, layout, cyl, sim_cfg, [seed, i],
                            with_proprio="prop" in model.modalities,
                            metadata={"pose": i, "segment": seg_idx})
        window, _ = ex.preprocess(event.clip)
        if float(np.max(np.abs(window.samples))) < threshold:
            rejected += 1
            continue
        raw = harvest([event], ex, flags)
        table = finalize_table(raw, ex.norm_stats, use_proprio=flags.use_proprio)
        pred_cp = model.predict_points(table)[0]
        pred_world = center + to_cartesian(pred_cp, cyl)
        preds_world.append(pred_world)
        truths_world.append(contact_world)
        pair_d.append(float(np.linalg.norm(pred_world - contact_world)))
    notes = []
    if not preds_world:
        notes.append("no accepted contacts; map is empty")
    return MappingResult(
        predicted=PointCloud(np.array(preds_world).reshape(-1, 3)),
        truth=PointCloud(np.array(truths_world).reshape(-1, 3)),
        pair_distances=np.array(pair_d),
        attempted=len(plan.poses), contacts=contacts, misses=misses,
        rejected=rejected, out_of_band=out_of_band, notes=tuple(notes))


def score_map(result: MappingResult, scene: BranchScene,
              resolution: float = 0.001) -> dict:
    """Chamfer (predicted map vs true surface) and per-contact MED, in cm."""
    from .geometry import chamfer_rms
    if len(result.predicted) == 0:
        raise EmptyInput("empty predicted map")
    surf = surface_points(scene, resolution)
    chamfer = chamfer_rms(result.predicted, surf)
    med = float(np.mean(result.pair_distances))
    return {
        "chamfer_cm": chamfer * 100.0,
        "med_cm": med * 100.0,
        "n_points": len(result.predicted),
        "attempted": result.attempted,
        "misses": result.misses,
        "rejected": result.rejected,
        "out_of_band": result.out_of_band,
    }
