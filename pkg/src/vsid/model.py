"""Truncated symmetric Volterra series: parameter layout, regressors, simulation.

The model output is a polynomial generalization of discrete convolution:
a constant offset plus, for each order m, an m-dimensional kernel summed
against m-fold products of delayed inputs.  Kernels are stored in symmetric
(collapsed) form: one coefficient per non-decreasing lag tuple, with the
permutation multiplicity folded into the regressor so that the stored value
is the symmetric kernel value itself.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

# Counts above this do not fit a signed 64-bit index and are refused.
_MAX_COEFFICIENTS = 2**63 - 1


def count_coefficients(m: int, n_m: int) -> int:
    """Number of unique entries of a symmetric order-``m`` kernel with ``n_m`` lags.

    Equals C(n_m + m - 1, m), the number of multisets of size m drawn from
    n_m lag values.

    Raises
    ------
    ValueError
        If ``m`` or ``n_m`` is not a positive integer.
    OverflowError
        If the count exceeds a signed 64-bit integer.
    """
    if m < 1 or n_m < 1:
        raise ValueError(f"order and memory must be >= 1, got m={m}, n_m={n_m}")
    count = math.comb(n_m + m - 1, m)
    if count > _MAX_COEFFICIENTS:
        raise OverflowError(
            f"coefficient count {count} for (m={m}, n_m={n_m}) exceeds 64-bit range"
        )
    return count


def enumerate_symmetric_indices(m: int, n_m: int) -> list[tuple[tuple[int, ...], int]]:
    """Canonical lag tuples and multiplicities for a symmetric order-``m`` kernel.

    Returns the non-decreasing lag tuples in lexicographic order, each paired
    with the number of distinct permutations it represents.  Multiplicities
    over all tuples sum to ``n_m**m``.
    """
    if m < 1 or n_m < 1:
        raise ValueError(f"order and memory must be >= 1, got m={m}, n_m={n_m}")
    out = []
    for lags in itertools.combinations_with_replacement(range(n_m), m):
        mult = math.factorial(m)
        for _, group in itertools.groupby(lags):
            mult //= math.factorial(sum(1 for _ in group))
        out.append((lags, mult))
    return out


@dataclass(frozen=True)
class VolterraStructure:
    """Shape of a truncated Volterra series and the layout of its parameter vector.

    Parameters
    ----------
    max_degree : int
        Highest kernel order M (>= 0).
    include_offset : bool
        Whether a constant term h0 is present.
    memory : tuple of int
        Memory length (number of lags) per order, one entry for each
        order 1..M.

    The parameter vector is laid out as ``[h0 | h1 | ... | hM]`` with each
    order block in the canonical order of :func:`enumerate_symmetric_indices`.
    All other modules rely on this single layout.
    """

    max_degree: int
    include_offset: bool
    memory: tuple[int, ...]

    def __post_init__(self):
        if self.max_degree < 0:
            raise ValueError(f"max_degree must be >= 0, got {self.max_degree}")
        if len(self.memory) != self.max_degree:
            raise ValueError(
                f"memory must have one entry per order 1..{self.max_degree}, "
                f"got {len(self.memory)} entries"
            )
        if any(n < 1 for n in self.memory):
            raise ValueError(f"memory lengths must be >= 1, got {self.memory}")
        if not self.include_offset and self.max_degree == 0:
            raise ValueError("structure has no offset and no kernel orders")

    @property
    def orders(self) -> range:
        return range(1, self.max_degree + 1)

    @cached_property
    def index_maps(self) -> dict[int, list[tuple[tuple[int, ...], int]]]:
        """Canonical (lag tuple, multiplicity) list per order."""
        return {
            m: enumerate_symmetric_indices(m, self.memory[m - 1]) for m in self.orders
        }

    @cached_property
    def block_sizes(self) -> dict[int, int]:
        """Coefficient count per block, keyed by order (0 = offset)."""
        sizes = {}
        if self.include_offset:
            sizes[0] = 1
        for m in self.orders:
            sizes[m] = count_coefficients(m, self.memory[m - 1])
        return sizes

    @cached_property
    def block_slices(self) -> dict[int, slice]:
        """Position of each order block inside the parameter vector."""
        slices = {}
        start = 0
        for m in sorted(self.block_sizes):
            size = self.block_sizes[m]
            slices[m] = slice(start, start + size)
            start += size
        return slices

    @cached_property
    def n_theta(self) -> int:
        return sum(self.block_sizes.values())


@dataclass(frozen=True)
class VolterraModel:
    """A structure plus its estimated/true coefficient vector."""

    structure: VolterraStructure
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.shape != (self.structure.n_theta,):
            raise ValueError(
                f"theta must have length {self.structure.n_theta}, got {theta.shape}"
            )
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta contains non-finite entries")
        object.__setattr__(self, "theta", theta)


@dataclass(frozen=True)
class Dataset:
    """Paired input/output records with sampling metadata."""

    u: np.ndarray
    y: np.ndarray
    sample_period: float

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if u.ndim != 1 or y.ndim != 1 or len(u) != len(y):
            raise ValueError("u and y must be 1-d arrays of equal length")
        if len(u) < 1:
            raise ValueError("dataset must contain at least one sample")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite samples")
        if not self.sample_period > 0:
            raise ValueError(f"sample_period must be > 0, got {self.sample_period}")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.u)


def regressor_row(u: np.ndarray, n: int, structure: VolterraStructure) -> np.ndarray:
    """Row of the observation matrix for time index ``n``.

    Inputs before index 0 are taken as zero (system initially at rest; a
    nonzero initial condition is modelled separately by the transient term).
    Each entry is multiplicity * prod(u[n - tau_i]) for its lag tuple.
    """
    u = np.asarray(u, dtype=float)
    if not 0 <= n < len(u):
        raise ValueError(f"time index {n} out of range for {len(u)} samples")
    row = np.empty(structure.n_theta)
    if structure.include_offset:
        row[structure.block_slices[0]] = 1.0
    for m in structure.orders:
        block = row[structure.block_slices[m]]
        for k, (lags, mult) in enumerate(structure.index_maps[m]):
            prod = 1.0
            for tau in lags:
                prod *= u[n - tau] if n - tau >= 0 else 0.0
            block[k] = prod * mult
    return row


def _lagged_inputs(u: np.ndarray, n_m: int) -> np.ndarray:
    """Matrix of zero-padded delayed copies of u: column tau holds u[n - tau]."""
    n_samp = len(u)
    lagged = np.zeros((n_samp, n_m))
    for tau in range(min(n_m, n_samp)):
        lagged[tau:, tau] = u[: n_samp - tau]
    return lagged


def _order_block(
    u_lagged: np.ndarray, index_map: list[tuple[tuple[int, ...], int]]
) -> np.ndarray:
    """Rows of one order block: products over each tuple's lag columns."""
    lag_idx = np.array([lags for lags, _ in index_map])  # (n_coef, m)
    mults = np.array([mult for _, mult in index_map], dtype=float)
    block = u_lagged[:, lag_idx[:, 0]]
    for j in range(1, lag_idx.shape[1]):
        block = block * u_lagged[:, lag_idx[:, j]]
    return block * mults


def build_observation_matrix(u: np.ndarray, structure: VolterraStructure) -> np.ndarray:
    """Dense observation matrix K (N x n_theta); row n is ``regressor_row(u, n)``.

    The first-order block is lower-triangular Toeplitz in u.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim != 1 or len(u) == 0:
        raise ValueError("u must be a non-empty 1-d array")
    n_samp = len(u)
    k = np.empty((n_samp, structure.n_theta))
    if structure.include_offset:
        k[:, structure.block_slices[0]] = 1.0
    for m in structure.orders:
        u_lagged = _lagged_inputs(u, structure.memory[m - 1])
        k[:, structure.block_slices[m]] = _order_block(u_lagged, structure.index_maps[m])
    return k


def simulate_output(
    u: np.ndarray, model: VolterraModel, chunk: int = 256
) -> np.ndarray:
    """Noise-free model output, equal to K @ theta without materializing K.

    Rows are processed in chunks so peak scratch stays at
    ``chunk * max_block`` values instead of ``N * n_theta``.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim != 1 or len(u) == 0:
        raise ValueError("u must be a non-empty 1-d array")
    structure = model.structure
    n_samp = len(u)
    y = np.zeros(n_samp)
    if structure.include_offset:
        y += model.theta[structure.block_slices[0]][0]
    for m in structure.orders:
        u_lagged = _lagged_inputs(u, structure.memory[m - 1])
        theta_m = model.theta[structure.block_slices[m]]
        for start in range(0, n_samp, chunk):
            stop = min(start + chunk, n_samp)
            block = _order_block(u_lagged[start:stop], structure.index_maps[m])
            y[start:stop] += block @ theta_m
    return y


# Dataset CSV format: header "u,y", one row per sample; the sample period is
# carried by configuration, not by the file.

def save_dataset_csv(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["u", "y"])
        for u_n, y_n in zip(dataset.u, dataset.y):
            writer.writerow([repr(float(u_n)), repr(float(y_n))])


def load_dataset_csv(path: str | Path, sample_period: float) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["u", "y"]:
            raise ValueError(f"{path}: expected header 'u,y', got {header}")
        u, y = [], []
        for row in reader:
            if not row:
                continue
            u.append(float(row[0]))
            y.append(float(row[1]))
    return Dataset(np.array(u), np.array(y), sample_period)
