"""Synthetic event streams from moving shapes and (sparse, dense) training pairs.

Each pixel keeps a reference log-brightness.  Whenever the current value is
at least one threshold away from the reference, an event is emitted and the
reference moves one threshold toward the current value; a jump of k
thresholds within one simulation step yields k events whose timestamps are
interpolated linearly inside the step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .events import (EventCloud, SensorGeometry, TimeAnchor, make_events, normalize, slice_stream,
                     subsample_indices)

# (dense, sparse) sizes used for the four public datasets
DATASET_RATIOS = {
    "nmnist_256": (1024, 256),
    "nmnist_128": (1024, 128),
    "ecd": (8192, 4096),
    "1mpx": (16384, 4096),
}


@dataclass(frozen=True)
class Bar:
    center: tuple
    velocity: tuple  # px / us
    length: float
    width: float
    angle: float = 0.0
    spin: float = 0.0  # rad / us
    contrast: float = 1.0

    def coverage(self, xx, yy, t):
        cx = self.center[0] + self.velocity[0] * t
        cy = self.center[1] + self.velocity[1] * t
        a = self.angle + self.spin * t
        u = (xx - cx) * np.cos(a) + (yy - cy) * np.sin(a)
        v = -(xx - cx) * np.sin(a) + (yy - cy) * np.cos(a)
        sd = np.maximum(np.abs(u) - self.length / 2, np.abs(v) - self.width / 2)
        return np.clip(0.5 - sd, 0.0, 1.0)

    def bounds(self, t):
        cx = self.center[0] + self.velocity[0] * t
        cy = self.center[1] + self.velocity[1] * t
        r = 0.5 * np.hypot(self.length, self.width) + 1.0
        return cx - r, cx + r, cy - r, cy + r


@dataclass(frozen=True)
class Disk:
    center: tuple
    velocity: tuple
    radius: float
    growth: float = 0.0  # px / us
    contrast: float = 1.0

    def coverage(self, xx, yy, t):
        cx = self.center[0] + self.velocity[0] * t
        cy = self.center[1] + self.velocity[1] * t
        r = max(self.radius + self.growth * t, 0.0)
        sd = np.hypot(xx - cx, yy - cy) - r
        return np.clip(0.5 - sd, 0.0, 1.0)

    def bounds(self, t):
        cx = self.center[0] + self.velocity[0] * t
        cy = self.center[1] + self.velocity[1] * t
        r = max(self.radius + self.growth * t, 0.0) + 1.0
        return cx - r, cx + r, cy - r, cy + r


@dataclass(frozen=True)
class Stroke:
    """A thick polyline (digit-like) translating with constant velocity."""

    vertices: tuple
    velocity: tuple
    width: float = 1.5
    contrast: float = 1.0

    def coverage(self, xx, yy, t):
        ox, oy = self.velocity[0] * t, self.velocity[1] * t
        best = np.full(np.shape(xx), np.inf)
        pts = np.asarray(self.vertices, dtype=np.float64)
        for (ax, ay), (bx, by) in zip(pts[:-1], pts[1:]):
            ax, ay, bx, by = ax + ox, ay + oy, bx + ox, by + oy
            dx, dy = bx - ax, by - ay
            L2 = dx * dx + dy * dy
            s = np.clip(((xx - ax) * dx + (yy - ay) * dy) / L2, 0, 1) if L2 > 0 else 0.0
            best = np.minimum(best, np.hypot(xx - ax - s * dx, yy - ay - s * dy))
        return np.clip(0.5 - (best - self.width / 2), 0.0, 1.0)

    def bounds(self, t):
        pts = np.asarray(self.vertices, dtype=np.float64)
        ox, oy = self.velocity[0] * t, self.velocity[1] * t
        r = self.width / 2 + 1.0
        return (pts[:, 0].min() + ox - r, pts[:, 0].max() + ox + r,
                pts[:, 1].min() + oy - r, pts[:, 1].max() + oy + r)


@dataclass(frozen=True)
class SceneSpec:
    geometry: SensorGeometry
    duration: int
    objects: tuple
    background: float = 0.0

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not self.objects:
            raise ValueError("a scene needs at least one object")

    def log_brightness(self, t: float) -> np.ndarray:
        W, H = self.geometry.W, self.geometry.H
        out = np.full((H, W), float(self.background))
        for obj in self.objects:
            # coverage is exactly zero outside the object's bounding box
            x0, x1, y0, y1 = obj.bounds(t)
            x0, y0 = max(int(np.floor(x0)), 0), max(int(np.floor(y0)), 0)
            x1, y1 = min(int(np.ceil(x1)) + 1, W), min(int(np.ceil(y1)) + 1, H)
            if x0 >= x1 or y0 >= y1:
                continue
            yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
            out[y0:y1, x0:x1] += obj.contrast * obj.coverage(xx, yy, t)
        return out


@dataclass(frozen=True)
class CaptureSpec:
    threshold: float = 0.2
    refractory: int = 100
    frame_dt: int = 200
    ref_jitter: float = 0.0  # initial reference offset, in thresholds

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.frame_dt < 1:
            raise ValueError("frame_dt must be >= 1")


def simulate_events(scene: SceneSpec, capture: CaptureSpec, seed=0) -> np.ndarray:
    """Events sorted by (t, y, x, p).

    ``seed`` only drives the initial per-pixel reference offset (uniform in
    +-ref_jitter/2 thresholds), which decorrelates event phases between pixels.
    """
    rng = np.random.default_rng(seed)
    T = capture.threshold
    prev = scene.log_brightness(0.0)
    ref = prev + rng.uniform(-0.5, 0.5, prev.shape) * T * capture.ref_jitter
    last = np.full(prev.shape, -np.inf)
    chunks = []
    n_steps = int(np.ceil(scene.duration / capture.frame_dt))
    for k in range(1, n_steps + 1):
        t1 = min(k * capture.frame_dt, scene.duration)
        t0 = (k - 1) * capture.frame_dt
        cur = scene.log_brightness(float(t1))
        while True:
            diff = cur - ref
            fire = np.abs(diff) >= T
            if not fire.any():
                break
            yy, xx = np.nonzero(fire)
            sign = np.sign(diff[yy, xx])
            level = ref[yy, xx] + sign * T
            span = cur[yy, xx] - prev[yy, xx]
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(span != 0, (level - prev[yy, xx]) / span, 1.0)
            ts = np.rint(t0 + np.clip(frac, 0.0, 1.0) * (t1 - t0))
            ok = ts >= last[yy, xx] + capture.refractory
            if not ok.any():
                break
            yy, xx, sign, level, ts = yy[ok], xx[ok], sign[ok], level[ok], ts[ok]
            ref[yy, xx] = level
            last[yy, xx] = ts
            chunks.append(make_events(xx, yy, ts.astype(np.int64), (sign > 0).astype(np.uint8)))
        prev = cur
    if not chunks:
        return make_events([], [], [], [])
    ev = np.concatenate(chunks)
    order = np.lexsort((ev["p"], ev["x"], ev["y"], ev["t"]))
    return ev[order]


def random_scene(rng, geometry: SensorGeometry = SensorGeometry(128, 128), duration: int = 200_000,
                 speed=(1e-4, 3e-4), size=(2.0, 5.0), max_objects: int = 1) -> SceneSpec:
    """Up to ``max_objects`` translating bars or polyline strokes.

    ``speed`` is in px/us and ``size`` bounds the bar length (and the stroke
    vertex spread); each object crosses the sensor center near mid-scene.
    """
    W, H = geometry.W, geometry.H
    objects = []
    for _ in range(rng.integers(1, max_objects + 1)):
        v = rng.uniform(*speed)
        heading = rng.uniform(0, 2 * np.pi)
        vel = (v * np.cos(heading), v * np.sin(heading))
        start = (W / 2 - vel[0] * duration / 2 + rng.normal(0, W / 6),
                 H / 2 - vel[1] * duration / 2 + rng.normal(0, H / 6))
        contrast = rng.choice([-1, 1]) * rng.uniform(0.6, 1.0)
        if rng.random() < 0.5:
            objects.append(Bar(start, vel, length=rng.uniform(*size), width=rng.uniform(1.0, 2.0),
                               angle=rng.uniform(0, np.pi), contrast=contrast))
        else:
            pts = np.cumsum(rng.normal(0, size[1] / 3, (3, 2)), axis=0)
            pts = pts - pts.mean(axis=0) + start
            objects.append(Stroke(tuple(map(tuple, pts)), vel, width=rng.uniform(1.0, 1.5), contrast=contrast))
    return SceneSpec(geometry, duration, tuple(objects))


@dataclass
class Pair:
    sparse: EventCloud
    dense: EventCloud
    anchor: TimeAnchor
    geometry: SensorGeometry
    sample_id: str = ""
    sparse_idx: np.ndarray = field(default=None, repr=False)


def build_pairs(events: np.ndarray, geometry: SensorGeometry, n_dense: int, n_sparse: int, seed=0,
                prefix: str = "s") -> list[Pair]:
    """Slice at ``n_dense``, normalise, and subsample each slice to ``n_sparse`` points."""
    if not 1 <= n_sparse < n_dense:
        raise ValueError(f"need 1 <= n_sparse < n_dense, got {n_sparse}, {n_dense}")
    ss = np.random.SeedSequence(seed)
    out = []
    for k, sl in enumerate(slice_stream(events, geometry, n_dense)):
        dense, anchor = normalize(sl)
        idx = subsample_indices(n_dense, n_sparse, ss.spawn(1)[0])
        sparse = EventCloud(dense.coords[idx], dense.polarity[idx])
        out.append(Pair(sparse, dense, anchor, geometry, f"{prefix}{k}", idx))
    return out


TOY_CAPTURE = CaptureSpec(threshold=0.2, refractory=100, frame_dt=500, ref_jitter=0.5)


def synthetic_pairs(n_pairs: int, n_dense: int = 256, n_sparse: int = 64, seed=0,
                    geometry: SensorGeometry = SensorGeometry(128, 128),
                    capture: CaptureSpec = TOY_CAPTURE, **scene_kw) -> list[Pair]:
    """Simulate random scenes until ``n_pairs`` pairs are collected.

    Extra keyword arguments go to ``random_scene``.
    """
    ss = np.random.SeedSequence(seed)
    pairs = []
    scene_no = 0
    while len(pairs) < n_pairs:
        child = ss.spawn(1)[0]
        rng = np.random.default_rng(child)
        scene = random_scene(rng, geometry, **scene_kw)
        ev = simulate_events(scene, capture, rng.integers(1 << 31))
        got = build_pairs(ev, geometry, n_dense, n_sparse, rng.integers(1 << 31), prefix=f"sc{scene_no}_")
        pairs.extend(got[: n_pairs - len(pairs)])
        scene_no += 1
    return pairs
