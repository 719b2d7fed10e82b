"""Synthetic complex phantoms for desk-scale experiments.

Each phantom is a stack of overlapping soft-edged ellipses with distinct
magnitudes, a low-order polynomial phase, and a smooth slice-to-slice
deformation of centers, axes, and orientation. Everything is drawn from one
counter-based stream, so a seed pins the output bitwise.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .imgstack import ComplexImageStack, save_stack

ELLIPSE_RANGE = (3, 8)
EDGE_SOFTNESS = 0.15


def _phantom_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, index]))


def make_phantom(slices: int, height: int, width: int, seed: int, index: int = 0) -> ComplexImageStack:
    """One deterministic phantom stack; ``index`` separates stacks of a set."""
    if slices < 1 or height < 4 or width < 4:
        raise InvalidInputError(f"phantom dims too small: {(slices, height, width)}")
    if not (0 <= seed < 2**32):
        raise InvalidInputError(f"seed must fit in 32 unsigned bits, got {seed}")
    rng = _phantom_rng(seed, index)
    lo, hi = ELLIPSE_RANGE
    n = int(rng.integers(lo, hi + 1))

    # distinct magnitudes: spaced levels, shuffled, with sub-spacing jitter
    mags = rng.permutation(np.linspace(18.0, 58.0, n)) + rng.uniform(-1.0, 1.0, n)
    cx = rng.uniform(0.3, 0.7, n)
    cy = rng.uniform(0.3, 0.7, n)
    ax = rng.uniform(0.10, 0.30, n)
    ay = rng.uniform(0.10, 0.30, n)
    theta = rng.uniform(0.0, math.pi, n)
    # per-ellipse deformation amplitudes and phases for the slice direction
    dx = rng.uniform(-0.06, 0.06, n)
    dy = rng.uniform(-0.06, 0.06, n)
    dscale = rng.uniform(-0.15, 0.15, n)
    dtheta = rng.uniform(-0.4, 0.4, n)
    dphase = rng.uniform(0.0, 2.0 * math.pi, n)
    # phase polynomial in normalized coordinates, plus a slow slice drift
    coeff = np.concatenate([rng.uniform(-0.8, 0.8, 3), rng.uniform(-0.5, 0.5, 3)])
    coeff_drift = rng.uniform(-0.2, 0.2, 6)

    yy = np.linspace(-1.0, 1.0, height)[:, None]
    xx = np.linspace(-1.0, 1.0, width)[None, :]
    scale = min(height, width)

    out = np.empty((slices, height, width), dtype=np.complex64)
    for s in range(slices):
        t = s / (slices - 1) if slices > 1 else 0.0
        drift = np.sin(math.pi * t + dphase)
        mag = np.zeros((height, width), dtype=np.float64)
        for k in range(n):
            ck_x = (cx[k] + dx[k] * drift[k]) * width
            ck_y = (cy[k] + dy[k] * drift[k]) * height
            grow = 1.0 + dscale[k] * t * (1.0 - t) * 4.0
            a = ax[k] * scale * grow
            b = ay[k] * scale * grow
            ang = theta[k] + dtheta[k] * t
            u = (np.arange(width) - ck_x)[None, :]
            v = (np.arange(height) - ck_y)[:, None]
            ur = u * math.cos(ang) + v * math.sin(ang)
            vr = -u * math.sin(ang) + v * math.cos(ang)
            r2 = (ur / a) ** 2 + (vr / b) ** 2
            mag += mags[k] * np.clip((1.0 - r2) / EDGE_SOFTNESS, 0.0, 1.0)
        c = coeff + coeff_drift * t
        phase = (
            c[0]
            + c[1] * xx
            + c[2] * yy
            + c[3] * xx * xx
            + c[4] * xx * yy
            + c[5] * yy * yy
        )
        out[s] = (mag * np.exp(1j * phase)).astype(np.complex64)
    return ComplexImageStack(out)


def write_phantom_set(
    count: int, slices: int, height: int, width: int, seed: int, out_dir
) -> list[Path]:
    """Write ``count`` phantom IMTS files named phantom_000.imts onward."""
    if count < 1:
        raise InvalidInputError(f"count must be >= 1, got {count}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(count):
        stack = make_phantom(slices, height, width, seed, index=k)
        path = out_dir / f"phantom_{k:03d}.imts"
        save_stack(stack, path)
        paths.append(path)
    return paths
