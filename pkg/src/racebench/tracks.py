"""Synthetic circuits at RoboRacer scale.

``track_a`` is a stadium (two straights joined by semicircles), about 18 m
long with the corridor width oscillating between 1.6 m and 2.1 m.
``track_b`` starts from the same oval and pushes one straight inward, which
adds a left-right-left sequence and more asymmetric steering.
"""

import math

import numpy as np

from .geometry import TrackDefinition


def stadium_length(straight: float, radius: float) -> float:
    return 2.0 * straight + 2.0 * math.pi * radius


def _stadium_points(straight, radius, n):
    L = stadium_length(straight, radius)
    s = np.linspace(0.0, L, n, endpoint=False)
    x = np.empty(n)
    y = np.empty(n)
    arc = math.pi * radius
    for i, si in enumerate(s):
        if si < straight:  # bottom straight, heading +x
            x[i], y[i] = -straight / 2 + si, -radius
        elif si < straight + arc:  # right semicircle
            a = (si - straight) / radius - math.pi / 2
            x[i], y[i] = straight / 2 + radius * math.cos(a), radius * math.sin(a)
        elif si < 2 * straight + arc:  # top straight, heading -x
            x[i], y[i] = straight / 2 - (si - straight - arc), radius
        else:  # left semicircle
            a = (si - 2 * straight - arc) / radius + math.pi / 2
            x[i], y[i] = -straight / 2 + radius * math.cos(a), radius * math.sin(a)
    return s, x, y


def track_a(n: int = 180, length: float = 18.0, radius: float = 1.5,
            width_min: float = 1.6, width_max: float = 2.1) -> TrackDefinition:
    straight = (length - 2.0 * math.pi * radius) / 2.0
    s, x, y = _stadium_points(straight, radius, n)
    mid, amp = (width_max + width_min) / 2, (width_max - width_min) / 2
    width = mid + amp * np.cos(4.0 * math.pi * s / length)
    return TrackDefinition(x, y, width / 2, width / 2, closed=True)


def track_b(n: int = 240, width_min: float = 1.6, width_max: float = 2.0) -> TrackDefinition:
    # wider oval with the bottom straight pushed inward into a second, tighter bend
    straight, radius = 5.0, 1.8
    s, x, y = _stadium_points(straight, radius, n)
    L = stadium_length(straight, radius)
    bump = 0.7 * np.exp(-0.5 * (x / 1.4) ** 2) * (y < 0)
    y = y + bump
    width = (width_max + width_min) / 2 + (width_max - width_min) / 2 * np.cos(2.0 * math.pi * s / L)
    return TrackDefinition(x, y, width / 2, width / 2, closed=True)


def straight_track(length: float = 10.0, width: float = 1.0, n: int = 101) -> TrackDefinition:
    x = np.linspace(0.0, length, n)
    return TrackDefinition(x, np.zeros(n), np.full(n, width / 2), np.full(n, width / 2), closed=False)


def ring_track(radius: float = 2.0, width: float = 1.0, n: int = 120) -> TrackDefinition:
    th = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
    return TrackDefinition(radius * np.cos(th), radius * np.sin(th),
                           np.full(n, width / 2), np.full(n, width / 2), closed=True)


TRACKS = {"A": track_a, "B": track_b}
