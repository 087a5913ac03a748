"""Independent reference implementations used only to check the package.

Everything here is deliberately written from scratch with plain numpy so it
shares no code path with the implementations under test.
"""

from __future__ import annotations

import math

import numpy as np

from moniground.geom3d import Box7


def sample_inside_box(box: Box7, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples inside a box, built from its own local frame."""
    local = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([box.l, box.w, box.h])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1]
    world[:, 1] = s * local[:, 0] + c * local[:, 1]
    world[:, 2] = local[:, 2]
    return world + box.center


def contains_fraction(points: np.ndarray, box: Box7) -> float:
    """Fraction of points inside `box`, via inline corner-frame inversion."""
    d = points - box.center
    c, s = math.cos(-box.yaw), math.sin(-box.yaw)
    x = c * d[:, 0] - s * d[:, 1]
    y = s * d[:, 0] + c * d[:, 1]
    inside = (
        (np.abs(x) <= box.l / 2 + 1e-15)
        & (np.abs(y) <= box.w / 2 + 1e-15)
        & (np.abs(d[:, 2]) <= box.h / 2 + 1e-15)
    )
    return float(np.mean(inside))


def mc_iou(a: Box7, b: Box7, n: int, rng: np.random.Generator) -> float:
    """Monte-Carlo IoU: point counting from samples drawn inside each box."""
    vol_a = a.l * a.w * a.h
    vol_b = b.l * b.w * b.h
    inter_a = vol_a * contains_fraction(sample_inside_box(a, n, rng), b)
    inter_b = vol_b * contains_fraction(sample_inside_box(b, n, rng), a)
    inter = 0.5 * (inter_a + inter_b)
    union = vol_a + vol_b - inter
    return inter / union


def random_box(rng: np.random.Generator, center_span: float = 3.0) -> Box7:
    """Random box whose center lies within `center_span` of the origin."""
    center = rng.uniform(-center_span, center_span, size=3)
    l, w, h = rng.uniform(0.5, 4.0, size=3)
    yaw = rng.uniform(-math.pi, math.pi)
    return Box7(center, l, w, h, yaw)


def random_box_pair(rng: np.random.Generator) -> tuple[Box7, Box7]:
    """Pair of random boxes close enough that overlaps are common."""
    a = random_box(rng)
    offset = rng.uniform(-2.5, 2.5, size=3)
    l, w, h = rng.uniform(0.5, 4.0, size=3)
    yaw = rng.uniform(-math.pi, math.pi)
    return a, Box7(a.center + offset, l, w, h, yaw)
