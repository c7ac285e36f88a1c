"""Desk-scale ground truth: cascaded water tanks and multisine excitation.

Two tanks in series, fed by a pump signal.  Levels drain with the square
root of the level (Bernoulli outflow); the upper tank saturates at its
rim, and a configurable share of the overflow spills into the lower tank
while the rest is lost to the reservoir.  Below saturation the system is
weakly nonlinear, the overflow is a hard nonlinearity.

The excitation is a random-phase multisine: a periodic sum of cosines on
a band of integer frequency bins with seeded uniform phases, scaled to a
target sample standard deviation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .model import Dataset


@dataclass(frozen=True)
class TankParams:
    """Flow constants, saturation levels, overflow split and noise levels.

    Rates are per second; ``substeps`` fixed-step integration substeps are
    taken per output sample.  ``overflow_fraction`` is the share of
    upper-tank overflow that lands in the lower tank.
    """

    k1: float = 0.5
    k2: float = 0.4
    k3: float = 0.3
    k4: float = 0.2
    x1_max: float = 10.0
    x2_max: float = 10.0
    overflow_fraction: float = 0.5
    substeps: int = 10
    w1_std: float = 0.0
    w2_std: float = 0.0
    e_std: float = 0.0

    def __post_init__(self):
        for name in ("k1", "k2", "k3", "k4", "x1_max", "x2_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not 0.0 <= self.overflow_fraction <= 1.0:
            raise ValueError("overflow_fraction must be in [0, 1]")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        for name in ("w1_std", "w2_std", "e_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class ExcitationSpec:
    """Random-phase multisine description."""

    n_samples: int
    fs: float
    f_min: float
    f_max: float
    std: float
    seed: int

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if not self.fs > 0:
            raise ValueError("fs must be > 0")
        if not 0.0 <= self.f_min <= self.f_max <= self.fs / 2.0:
            raise ValueError("band must satisfy 0 <= f_min <= f_max <= fs/2")
        if not self.std > 0:
            raise ValueError("std must be > 0")


def multisine_bins(spec: ExcitationSpec) -> np.ndarray:
    """Excited integer frequency bins; band edges snap to the nearest bin.

    Bin 0 is never excited.  Snapping keeps stated band edges that sit a
    fraction of a bin away from an integer line (rounded figures) on the
    intended line.
    """
    k_lo = max(1, round(spec.f_min * spec.n_samples / spec.fs))
    k_hi = round(spec.f_max * spec.n_samples / spec.fs)
    if k_hi < k_lo:
        raise ValueError(
            f"excitation band [{spec.f_min}, {spec.f_max}] Hz contains no bins "
            f"at N={spec.n_samples}, fs={spec.fs}"
        )
    return np.arange(k_lo, k_hi + 1)


def multisine(spec: ExcitationSpec) -> np.ndarray:
    """Periodic random-phase multisine with exact target sample deviation."""
    bins = multisine_bins(spec)
    rng = np.random.default_rng(spec.seed)
    phases = rng.uniform(0.0, 2.0 * np.pi, len(bins))
    n = np.arange(spec.n_samples)
    angles = 2.0 * np.pi * np.outer(n, bins) / spec.n_samples + phases
    u = np.cos(angles).sum(axis=1)
    u *= spec.std / u.std()
    return u


def simulate_tanks(
    u: np.ndarray,
    params: TankParams,
    x0: tuple[float, float],
    fs: float,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Integrate the two-tank dynamics over a zero-order-held input.

    Explicit Euler with ``params.substeps`` substeps per sample; levels are
    clamped to [0, x_max] each substep and upper-tank overflow feeds the
    lower tank through the configured split.  States are reported at sample
    instants, so ``y[0]`` reflects the initial state.  Returns
    ``(y, x1, x2)``; ``y = x2 + e``.
    """
    u = np.asarray(u, dtype=float)
    x1, x2 = float(x0[0]), float(x0[1])
    if x1 < 0 or x2 < 0:
        raise ValueError(f"initial levels must be nonnegative, got {x0}")
    if not fs > 0:
        raise ValueError("fs must be > 0")
    n_samples = len(u)
    dt = 1.0 / fs / params.substeps
    sqrt_dt = math.sqrt(dt)
    rng = np.random.default_rng(seed)
    x1_traj = np.empty(n_samples)
    x2_traj = np.empty(n_samples)
    gamma = params.overflow_fraction
    for n in range(n_samples):
        x1_traj[n] = x1
        x2_traj[n] = x2
        u_n = u[n]
        for _ in range(params.substeps):
            w1 = params.w1_std * sqrt_dt * rng.standard_normal() if params.w1_std else 0.0
            w2 = params.w2_std * sqrt_dt * rng.standard_normal() if params.w2_std else 0.0
            inflow2 = dt * params.k2 * math.sqrt(x1)
            x1_new = x1 + dt * (-params.k1 * math.sqrt(x1) + params.k4 * u_n) + w1
            spill = 0.0
            if x1_new > params.x1_max:
                spill = gamma * (x1_new - params.x1_max)
                x1_new = params.x1_max
            x1 = max(x1_new, 0.0)
            x2_new = x2 + inflow2 - dt * params.k3 * math.sqrt(x2) + spill + w2
            x2 = min(max(x2_new, 0.0), params.x2_max)
    e = params.e_std * rng.standard_normal(n_samples) if params.e_std else 0.0
    return x2_traj + e, x1_traj, x2_traj


def equilibrium_levels(params: TankParams, u_const: float) -> tuple[float, float]:
    """Steady-state levels under a constant input (clamped to the rims)."""
    x1 = (params.k4 * max(u_const, 0.0) / params.k1) ** 2
    x1 = min(x1, params.x1_max)
    x2 = min((params.k2 / params.k3) ** 2 * x1, params.x2_max)
    return x1, x2


def rms_index(y_mod: np.ndarray, y_val: np.ndarray) -> float:
    """Root-mean-square deviation between a modelled and a reference output."""
    y_mod = np.asarray(y_mod, dtype=float)
    y_val = np.asarray(y_val, dtype=float)
    if y_mod.shape != y_val.shape or y_mod.ndim != 1 or len(y_mod) < 1:
        raise ValueError(
            f"outputs must be 1-d arrays of equal length, got {y_mod.shape} vs {y_val.shape}"
        )
    return float(np.sqrt(np.mean((y_mod - y_val) ** 2)))


@dataclass(frozen=True)
class TankDataset:
    dataset: Dataset
    x1: np.ndarray
    x2: np.ndarray
    overflow_events: int
    e_std: float


def generate_tank_dataset(
    exc: ExcitationSpec,
    params: TankParams,
    u_offset: float = 0.0,
    snr_db: float | None = None,
    x0: tuple[float, float] | None = None,
    noise_seed: int | None = None,
) -> TankDataset:
    """Excite the tanks with an offset multisine and record a noisy dataset.

    ``snr_db`` scales the output noise to the requested signal-to-noise
    ratio of the clean response (overriding ``params.e_std``); ``x0``
    defaults to the equilibrium at the input offset.  Deterministic given
    the excitation seed and ``noise_seed``.
    """
    u = u_offset + multisine(exc)
    if x0 is None:
        x0 = equilibrium_levels(params, u_offset)
    clean = replace(params, w1_std=0.0, w2_std=0.0, e_std=0.0)
    if noise_seed is None:
        noise_seed = exc.seed
    _, x1, x2 = simulate_tanks(u, clean, x0, exc.fs, seed=noise_seed)
    if snr_db is not None:
        e_std = float(np.std(x2)) / 10.0 ** (snr_db / 20.0)
    else:
        e_std = params.e_std
    rng = np.random.default_rng(noise_seed)
    y = x2 + e_std * rng.standard_normal(len(u))
    overflow = int(np.sum(x1 >= params.x1_max * (1.0 - 1e-12)))
    return TankDataset(
        dataset=Dataset(u, y, 1.0 / exc.fs),
        x1=x1,
        x2=x2,
        overflow_events=overflow,
        e_std=e_std,
    )
