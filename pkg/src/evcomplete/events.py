"""Raw and normalized event representations.

A raw event stream is a numpy structured array with fields ``t`` (int64
microseconds), ``x``, ``y`` (uint16 pixel coordinates) and ``p`` (uint8
polarity bit).  Normalized slices live in [-1, 1]^3 with a +-1 polarity
feature per point.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

EVENT_DTYPE = np.dtype([("t", "<i8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])


class RawEvent(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True)
class SensorGeometry:
    W: int
    H: int

    def __post_init__(self):
        if self.W < 2 or self.H < 2:
            raise ValueError(f"sensor must be at least 2x2, got {self.W}x{self.H}")


@dataclass(frozen=True)
class TimeAnchor:
    t0: int
    tN: int

    def __post_init__(self):
        if self.tN <= self.t0:
            raise ValueError(f"time anchor needs tN > t0, got t0={self.t0} tN={self.tN}")


def make_events(x, y, t, p) -> np.ndarray:
    """Pack column arrays into an EVENT_DTYPE array (no sorting)."""
    x = np.asarray(x)
    ev = np.empty(len(x), dtype=EVENT_DTYPE)
    ev["x"] = x
    ev["y"] = y
    ev["t"] = t
    ev["p"] = p
    return ev


def events_from_tuples(items) -> np.ndarray:
    items = [RawEvent(*e) for e in items]
    if not items:
        return np.empty(0, dtype=EVENT_DTYPE)
    x, y, t, p = zip(*items)
    return make_events(x, y, t, p)


def validate_events(events: np.ndarray, geometry: SensorGeometry) -> None:
    if events.dtype != EVENT_DTYPE:
        raise TypeError(f"expected EVENT_DTYPE, got {events.dtype}")
    if len(events) == 0:
        return
    if events["x"].max() >= geometry.W or events["y"].max() >= geometry.H:
        raise ValueError("event coordinates outside sensor")
    if events["p"].max() > 1:
        raise ValueError("polarity must be 0 or 1")
    if (events["t"] < 0).any():
        raise ValueError("negative timestamp")
    if (np.diff(events["t"]) < 0).any():
        raise ValueError("events are not sorted by timestamp")


@dataclass(frozen=True, eq=False)
class RawEventSlice:
    events: np.ndarray
    geometry: SensorGeometry

    def __post_init__(self):
        events = np.array(self.events)
        validate_events(events, self.geometry)
        if len(events) < 2:
            raise ValueError("a slice needs at least 2 events")
        if events["t"][-1] <= events["t"][0]:
            raise ValueError("slice has zero duration")
        events.setflags(write=False)
        object.__setattr__(self, "events", events)

    def __len__(self):
        return len(self.events)

    def __eq__(self, other):
        if not isinstance(other, RawEventSlice):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.events, other.events)

    @property
    def anchor(self) -> TimeAnchor:
        return TimeAnchor(int(self.events["t"][0]), int(self.events["t"][-1]))

    def tuples(self) -> list[RawEvent]:
        e = self.events
        return [RawEvent(int(a), int(b), int(c), int(d)) for a, b, c, d in zip(e["x"], e["y"], e["t"], e["p"])]


@dataclass(frozen=True, eq=False)
class EventCloud:
    """N points in [-1, 1]^3 (columns x, y, t) with a +-1 polarity feature."""

    coords: np.ndarray
    polarity: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        polarity = np.array(self.polarity, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3 or len(coords) < 1:
            raise ValueError(f"coords must be N x 3 with N >= 1, got {coords.shape}")
        if polarity.shape != (len(coords),):
            raise ValueError("polarity length must match coords")
        if not np.all(np.abs(coords) <= 1.0):
            raise ValueError("coords must lie in [-1, 1]")
        if not np.all(np.abs(polarity) == 1.0):
            raise ValueError("polarity entries must be exactly +-1")
        coords.setflags(write=False)
        polarity.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "polarity", polarity)

    def __len__(self):
        return len(self.coords)

    def __eq__(self, other):
        if not isinstance(other, EventCloud):
            return NotImplemented
        return np.array_equal(self.coords, other.coords) and np.array_equal(self.polarity, other.polarity)


def slice_stream(events: np.ndarray, geometry: SensorGeometry, n: int) -> list[RawEventSlice]:
    """Cut a sorted stream into consecutive slices of exactly ``n`` events.

    The trailing remainder is dropped, and slices whose first and last
    timestamps coincide are discarded.
    """
    if n < 2:
        raise ValueError(f"slice length must be >= 2, got {n}")
    out = []
    for k in range(len(events) // n):
        chunk = events[k * n:(k + 1) * n]
        if chunk["t"][-1] > chunk["t"][0]:
            out.append(RawEventSlice(chunk, geometry))
    return out


def normalize(sl: RawEventSlice, anchor: TimeAnchor | None = None) -> tuple[EventCloud, TimeAnchor]:
    """Map a slice into [-1, 1]^3; ``anchor`` defaults to the slice's own time span."""
    e = sl.events
    g = sl.geometry
    anchor = anchor or sl.anchor
    coords = np.empty((len(e), 3))
    coords[:, 0] = (e["x"] / (g.W - 1) - 0.5) * 2
    coords[:, 1] = (e["y"] / (g.H - 1) - 0.5) * 2
    coords[:, 2] = ((e["t"] - anchor.t0) / (anchor.tN - anchor.t0) - 0.5) * 2
    # guard against one-ulp overshoot from the float arithmetic
    np.clip(coords, -1.0, 1.0, out=coords)
    polarity = (e["p"].astype(np.float64) - 0.5) * 2
    return EventCloud(coords, polarity), anchor


def denormalize(cloud: EventCloud, geometry: SensorGeometry, anchor: TimeAnchor) -> RawEventSlice:
    c = cloud.coords
    x = np.clip(np.rint((c[:, 0] / 2 + 0.5) * (geometry.W - 1)), 0, geometry.W - 1).astype(np.int64)
    y = np.clip(np.rint((c[:, 1] / 2 + 0.5) * (geometry.H - 1)), 0, geometry.H - 1).astype(np.int64)
    t = np.rint(anchor.t0 + (c[:, 2] / 2 + 0.5) * (anchor.tN - anchor.t0)).astype(np.int64)
    p = np.rint((cloud.polarity + 1) / 2).astype(np.int64)
    order = np.lexsort((p, x, y, t))
    ev = make_events(x[order], y[order], t[order], p[order])
    return RawEventSlice(ev, geometry)


def subsample(cloud: EventCloud, m: int, seed) -> EventCloud:
    """Uniformly pick ``m`` points without replacement, keeping their order."""
    idx = subsample_indices(len(cloud), m, seed)
    return EventCloud(cloud.coords[idx], cloud.polarity[idx])


def subsample_indices(n: int, m: int, seed) -> np.ndarray:
    if not 1 <= m <= n:
        raise ValueError(f"cannot subsample {m} of {n} points")
    return np.sort(np.random.default_rng(seed).choice(n, size=m, replace=False))
