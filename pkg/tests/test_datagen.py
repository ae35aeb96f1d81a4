import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evcomplete.datagen import (DATASET_RATIOS, Bar, CaptureSpec, Disk, SceneSpec, Stroke, build_pairs,
                                random_scene, simulate_events, synthetic_pairs)
from evcomplete.events import SensorGeometry, make_events, validate_events


class StepPixel:
    """One pixel whose log-brightness jumps by ``amount`` at time ``at``."""

    def __init__(self, x, y, amount, at):
        self.x, self.y, self.amount, self.at = x, y, amount, at
        self.contrast = 1.0

    def coverage(self, xx, yy, t):
        hit = (xx == self.x) & (yy == self.y)
        return np.where(hit, self.amount if t >= self.at else 0.0, 0.0)

    def bounds(self, t):
        return self.x - 1, self.x + 1, self.y - 1, self.y + 1


G = SensorGeometry(16, 12)


def test_static_scene_no_events():
    scene = SceneSpec(G, 5000, (Disk((8, 6), (0, 0), 3),))
    assert len(simulate_events(scene, CaptureSpec())) == 0


def test_step_emits_floor_events():
    scene = SceneSpec(G, 1000, (StepPixel(3, 4, 2.5 * 0.2, 300),))
    ev = simulate_events(scene, CaptureSpec(threshold=0.2, refractory=0, frame_dt=100))
    assert len(ev) == 2 and np.all(ev["p"] == 1)
    assert np.all(ev["x"] == 3) and np.all(ev["y"] == 4)
    # the jump happens inside (200, 300]; interpolated stamps stay in the step
    assert np.all((ev["t"] > 200) & (ev["t"] <= 300))
    down = SceneSpec(G, 1000, (StepPixel(3, 4, -0.65, 300),))
    ev = simulate_events(down, CaptureSpec(threshold=0.2, refractory=0, frame_dt=100))
    assert len(ev) == 3 and np.all(ev["p"] == 0)


def test_refractory_limits_burst():
    scene = SceneSpec(G, 1000, (StepPixel(3, 4, 1.0, 300),))
    ev = simulate_events(scene, CaptureSpec(threshold=0.2, refractory=10_000, frame_dt=100))
    assert len(ev) == 1


@given(seed=st.integers(0, 2**20))
@settings(max_examples=20, deadline=None)
def test_threshold_monotonicity_and_event_invariants(seed):
    rng = np.random.default_rng(seed)
    g = SensorGeometry(24, 24)
    scene = random_scene(rng, g, duration=4000, speed=(2e-3, 5e-3), max_objects=2)
    counts = []
    for T in (0.1, 0.2, 0.4):
        ev = simulate_events(scene, CaptureSpec(threshold=T, refractory=0, frame_dt=100), seed)
        validate_events(ev, g)
        order = np.lexsort((ev["p"], ev["x"], ev["y"], ev["t"]))
        assert np.array_equal(order, np.arange(len(ev)))
        counts.append(len(ev))
    assert counts[0] >= counts[1] >= counts[2]


def test_build_pairs_counts_and_subset():
    rng = np.random.default_rng(0)
    n = 4096
    ev = make_events(rng.integers(0, 34, n), rng.integers(0, 34, n), np.arange(n) * 10, rng.integers(0, 2, n))
    pairs = build_pairs(ev, SensorGeometry(34, 34), 1024, 256, seed=1)
    assert len(pairs) == 4
    for pr in pairs:
        assert len(pr.sparse) == 256 and len(pr.dense) == 1024
        dense_rows = {tuple(r) + (p,) for r, p in zip(pr.dense.coords, pr.dense.polarity)}
        assert all(tuple(r) + (p,) in dense_rows for r, p in zip(pr.sparse.coords, pr.sparse.polarity))
        assert np.array_equal(pr.sparse.coords, pr.dense.coords[pr.sparse_idx])
    assert build_pairs(ev[:1000], SensorGeometry(34, 34), 1024, 256) == []
    with pytest.raises(ValueError):
        build_pairs(ev, SensorGeometry(34, 34), 256, 256)


def test_dataset_ratios():
    assert DATASET_RATIOS == {"nmnist_256": (1024, 256), "nmnist_128": (1024, 128), "ecd": (8192, 4096),
                            "1mpx": (16384, 4096)}


def test_synthetic_pairs_deterministic():
    a = synthetic_pairs(3, 64, 16, seed=3, geometry=SensorGeometry(32, 32))
    b = synthetic_pairs(3, 64, 16, seed=3, geometry=SensorGeometry(32, 32))
    assert len(a) == 3
    for x, y in zip(a, b):
        assert x.dense == y.dense and x.sparse == y.sparse and x.anchor == y.anchor


def test_shape_bounds_cover_support():
    shapes = [Bar((10.3, 7.1), (0.01, -0.02), 6, 2, 0.4, 1e-4), Disk((8, 8), (0.0, 0.01), 2.5, 1e-3),
              Stroke(((3, 3), (9, 5), (6, 10)), (0.002, 0.0), 1.5)]
    yy, xx = np.mgrid[0:24, 0:24].astype(float)
    for s in shapes:
        for t in (0.0, 100.0, 700.0):
            cov = s.coverage(xx, yy, t)
            x0, x1, y0, y1 = s.bounds(t)
            outside = (xx < x0) | (xx > x1) | (yy < y0) | (yy > y1)
            assert not cov[outside].any()


def test_capture_and_scene_validation():
    with pytest.raises(ValueError):
        SceneSpec(G, 0, (Disk((1, 1), (0, 0), 1),))
    with pytest.raises(ValueError):
        SceneSpec(G, 10, ())
    with pytest.raises(ValueError):
        CaptureSpec(threshold=0)
    with pytest.raises(ValueError):
        CaptureSpec(frame_dt=0)
