"""Regularized least-squares solvers: closed form, gradient, and streaming.

All three compute the minimizer of ``|Y - K theta|^2 + theta' D theta``.
The closed form factorizes the normal equations once; the gradient solver
is inversion-free (descent direction with adaptive step decimation); the
streaming solver runs the identical iteration but evaluates every inner
product element-wise from the input signal and a penalty row provider, so
its workspace stays at O(N + 6 n_theta) values instead of holding K and D.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import ConditioningError, DivergenceError
from .model import VolterraStructure
from .regularizers import PenaltyMatrix

BYTES_PER_VALUE = 8


@dataclass(frozen=True)
class SolverOptions:
    """Controls for the decimated-step gradient solvers.

    lambda0 is the step weight tried first on every iteration; on each
    rejected candidate it is multiplied by ``decimation`` until either the
    cost decreases or it falls below ``lambda_min``.  ``cost_tol`` is the
    relative cost-change tolerance; ``warm_start_ls`` runs an unpenalized
    pass first and starts the regularized pass from its result.
    """

    lambda0: float = 1e-4
    lambda_min: float = 1e-12
    decimation: float = 0.1
    cost_tol: float = 1e-10
    max_iter: int = 50_000
    theta0: np.ndarray | None = None
    warm_start_ls: bool = True
    record_iterates: bool = False

    def __post_init__(self):
        if not self.lambda0 > 0:
            raise ValueError(f"lambda0 must be > 0, got {self.lambda0}")
        if not 0 < self.lambda_min < self.lambda0:
            raise ValueError("lambda_min must satisfy 0 < lambda_min < lambda0")
        if not 0 < self.decimation < 1:
            raise ValueError(f"decimation must be in (0, 1), got {self.decimation}")
        if not self.cost_tol > 0:
            raise ValueError(f"cost_tol must be > 0, got {self.cost_tol}")
        if self.max_iter < 0:
            raise ValueError(f"max_iter must be >= 0, got {self.max_iter}")


@dataclass
class TrialRecord:
    iteration: int
    cost: float
    lam: float
    accepted: bool


@dataclass
class SolverTrace:
    """Every candidate evaluation of a gradient solve, plus run metadata."""

    records: list[TrialRecord] = field(default_factory=list)
    termination: str = "max_iter"
    initial_cost: float = np.nan
    final_cost: float = np.nan
    n_accepted: int = 0
    warm_start_accepted: int = 0
    aux_values_peak: int = 0
    iterates: list[np.ndarray] = field(default_factory=list)

    def accepted_costs(self) -> list[float]:
        return [r.cost for r in self.records if r.accepted]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "cost", "lambda", "accepted"])
            for r in self.records:
                writer.writerow([r.iteration, repr(r.cost), repr(r.lam), int(r.accepted)])


class _ZeroPenalty:
    def cost(self, theta):
        return 0.0

    def grad(self, theta):
        return np.zeros_like(theta)


class _DensePenalty:
    def __init__(self, d: np.ndarray):
        self.d = d

    def cost(self, theta):
        return float(theta @ (self.d @ theta))

    def grad(self, theta):
        return self.d @ theta


class _FilterPenalty:
    def __init__(self, f: np.ndarray, weight: float):
        self.f = f
        self.weight = weight

    def cost(self, theta):
        ftheta = self.f @ theta
        return self.weight * float(ftheta @ ftheta)

    def grad(self, theta):
        return self.weight * (self.f.T @ (self.f @ theta))


def _penalty_ops(penalty) -> object:
    if penalty is None:
        return _ZeroPenalty()
    if isinstance(penalty, np.ndarray):
        return _DensePenalty(penalty)
    if isinstance(penalty, PenaltyMatrix):
        if penalty.form == "filter":
            return _FilterPenalty(penalty.filter_factor, penalty.noise_var)
        return _DensePenalty(penalty.dense_d())
    raise TypeError(f"unsupported penalty type {type(penalty)!r}")


def cost(theta: np.ndarray, k: np.ndarray, y: np.ndarray, penalty=None) -> float:
    """Regularized least-squares cost ``|y - K theta|^2 + theta' D theta``."""
    theta = np.asarray(theta, dtype=float)
    k = np.asarray(k, dtype=float)
    y = np.asarray(y, dtype=float)
    if k.shape != (len(y), len(theta)):
        raise ValueError(
            f"dimension mismatch: K is {k.shape}, y has {len(y)}, theta has {len(theta)}"
        )
    e = y - k @ theta
    return float(e @ e) + _penalty_ops(penalty).cost(theta)


def gradient(theta: np.ndarray, k: np.ndarray, y: np.ndarray, penalty=None) -> np.ndarray:
    """Descent direction ``-K'(y - K theta) + D theta``.

    This is half the calculus gradient of :func:`cost`; the solvers' adaptive
    step absorbs the constant.  It vanishes at the regularized minimizer.
    """
    theta = np.asarray(theta, dtype=float)
    k = np.asarray(k, dtype=float)
    y = np.asarray(y, dtype=float)
    if k.shape != (len(y), len(theta)):
        raise ValueError(
            f"dimension mismatch: K is {k.shape}, y has {len(y)}, theta has {len(theta)}"
        )
    e = y - k @ theta
    return -(k.T @ e) + _penalty_ops(penalty).grad(theta)


def solve_exact(k: np.ndarray, y: np.ndarray, penalty=None) -> np.ndarray:
    """Closed-form regularized solution via an SPD factorization.

    Solves ``(K'K + D) theta = K'y`` with a Cholesky factorization; no
    explicit inverse and no pseudo-inverse fallback.  A direct-form penalty
    contributes ``noise_var * R`` as D.
    """
    k = np.asarray(k, dtype=float)
    y = np.asarray(y, dtype=float)
    a = k.T @ k
    if penalty is not None:
        d = penalty.dense_d() if isinstance(penalty, PenaltyMatrix) else np.asarray(penalty)
        if d.shape != a.shape:
            raise ValueError(f"penalty shape {d.shape} does not match K columns {a.shape}")
        a = a + d
    try:
        factor = scipy.linalg.cho_factor(a, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise ConditioningError(
            "normal equations are numerically singular or indefinite"
        ) from exc
    return scipy.linalg.cho_solve(factor, k.T @ y)


class _MatrixOps:
    """Cost/direction evaluations against a materialized observation matrix."""

    def __init__(self, k: np.ndarray, y: np.ndarray, penalty_ops):
        self.k = k
        self.y = y
        self.pen = penalty_ops
        self.e = np.zeros_like(y)

    def eval(self, theta: np.ndarray) -> float:
        self.e = self.y - self.k @ theta
        return float(self.e @ self.e) + self.pen.cost(theta)

    def direction(self, theta: np.ndarray) -> np.ndarray:
        return -(self.k.T @ self.e) + self.pen.grad(theta)


def _descent_loop(ops, theta0: np.ndarray, opts: SolverOptions, trace: SolverTrace):
    """Decimated-step gradient descent shared by the matrix and streaming paths.

    Per iteration: compute the descent direction at the current point,
    restore the step weight to its default, and evaluate candidates with
    progressively decimated steps until the cost decreases.  Terminate when
    the cost change falls below tolerance, the step weight underflows its
    threshold, or the iteration budget is exhausted.
    """
    theta = np.array(theta0, dtype=float, copy=True)
    theta_c = np.empty_like(theta)
    v = ops.eval(theta)
    if not np.isfinite(v):
        raise DivergenceError("initial cost is not finite")
    trace.initial_cost = v
    trace.termination = "max_iter"
    k_iter = 0
    while k_iter < opts.max_iter:
        g = ops.direction(theta)
        lam = opts.lambda0
        while True:
            np.multiply(g, -lam, out=theta_c)
            theta_c += theta
            v_c = ops.eval(theta_c)
            if not np.isfinite(v_c):
                raise DivergenceError(
                    "cost overflowed during descent; retry with a smaller lambda0"
                )
            converged = abs(v_c - v) < opts.cost_tol * max(1.0, abs(v))
            accepted = v_c < v and not converged
            trace.records.append(TrialRecord(k_iter, v_c, lam, accepted))
            if converged:
                trace.termination = "cost_tol"
                trace.final_cost = v
                return theta
            if accepted:
                theta, theta_c = theta_c, theta
                v = v_c
                trace.n_accepted += 1
                if opts.record_iterates:
                    trace.iterates.append(theta.copy())
                break
            if lam < opts.lambda_min:
                trace.termination = "lambda_min"
                trace.final_cost = v
                return theta
            lam *= opts.decimation
        k_iter += 1
    trace.final_cost = v
    return theta


def solve_gradient(
    k: np.ndarray,
    y: np.ndarray,
    penalty=None,
    opts: SolverOptions | None = None,
) -> tuple[np.ndarray, SolverTrace]:
    """Inversion-free regularized solve by decimated-step gradient descent.

    Accepts an assembled/covariance/direct penalty (dense D path) or a
    filter-form penalty (the factor enters the cost and direction directly,
    no inversion anywhere).  With ``warm_start_ls`` the unpenalized problem
    is descended first and seeds the regularized pass.
    """
    opts = opts or SolverOptions()
    k = np.asarray(k, dtype=float)
    y = np.asarray(y, dtype=float)
    pen = _penalty_ops(penalty)
    theta0 = (
        np.zeros(k.shape[1]) if opts.theta0 is None else np.asarray(opts.theta0, float)
    )
    trace = SolverTrace()
    if opts.warm_start_ls and not isinstance(pen, _ZeroPenalty):
        ls_trace = SolverTrace()
        theta0 = _descent_loop(_MatrixOps(k, y, _ZeroPenalty()), theta0, opts, ls_trace)
        trace.warm_start_accepted = ls_trace.n_accepted
    theta = _descent_loop(_MatrixOps(k, y, pen), theta0, opts, trace)
    return theta, trace


class _AuxMeter:
    """Tracks the solver-owned work arrays of a streaming solve."""

    def __init__(self):
        self.values = 0

    def register(self, *arrays: np.ndarray) -> None:
        self.values += sum(a.size for a in arrays)


class _StreamingOps:
    """Element-wise evaluations: K rows/columns from the input signal,
    penalty rows from a provider; never materializes K or D.

    The error buffer always holds the residual of the most recently
    evaluated point, which the descent loop guarantees is the point the
    next direction is requested at.
    """

    def __init__(self, u, y, structure: VolterraStructure, penalty_row, meter: _AuxMeter):
        self.u = u
        self.y = y
        self.structure = structure
        self.penalty_row = penalty_row
        n_samp = len(u)
        n_theta = structure.n_theta
        self.e = np.zeros(n_samp)
        self.krow = np.zeros(n_theta)
        self.rrow = np.zeros(n_theta)
        self.g = np.zeros(n_theta)
        meter.register(self.e, self.krow, self.rrow, self.g)
        # (column index) -> (multiplicity, lags) for the column dot products.
        self.columns = []
        if structure.include_offset:
            self.columns.append((1.0, ()))
        for m in structure.orders:
            for lags, mult in structure.index_maps[m]:
                self.columns.append((float(mult), lags))

    def _fill_row(self, n: int) -> np.ndarray:
        s = self.structure
        row = self.krow
        if s.include_offset:
            row[s.block_slices[0]] = 1.0
        u = self.u
        for m in s.orders:
            block = row[s.block_slices[m]]
            for idx, (lags, mult) in enumerate(s.index_maps[m]):
                prod = 1.0
                for tau in lags:
                    prod *= u[n - tau] if n - tau >= 0 else 0.0
                block[idx] = prod * mult
        return row

    def _column_dot(self, col: int, vec: np.ndarray) -> float:
        """Dot of observation-matrix column ``col`` with ``vec`` (length N)."""
        mult, lags = self.columns[col]
        if not lags:
            return mult * float(vec.sum())
        tau_max = lags[-1]
        n_samp = len(self.u)
        views = [vec[tau_max:]]
        views += [self.u[tau_max - tau : n_samp - tau] for tau in lags]
        return mult * float(np.einsum(",".join(["i"] * len(views)) + "->", *views))

    def eval(self, theta: np.ndarray) -> float:
        v_ls = 0.0
        for n in range(len(self.u)):
            row = self._fill_row(n)
            e_n = self.y[n] - float(row @ theta)
            self.e[n] = e_n
            v_ls += e_n * e_n
        v_reg = 0.0
        for l in range(len(theta)):
            self.penalty_row(l, self.rrow)
            v_reg += theta[l] * float(self.rrow @ theta)
        return v_ls + v_reg

    def direction(self, theta: np.ndarray) -> np.ndarray:
        for l in range(len(theta)):
            self.penalty_row(l, self.rrow)
            self.g[l] = -self._column_dot(l, self.e) + float(self.rrow @ theta)
        return self.g


class _ZeroRowProvider:
    def __call__(self, l: int, out: np.ndarray) -> np.ndarray:
        out[:] = 0.0
        return out


def solve_streaming(
    u: np.ndarray,
    y: np.ndarray,
    structure: VolterraStructure,
    penalty_rows,
    opts: SolverOptions | None = None,
) -> tuple[np.ndarray, SolverTrace]:
    """Memory-reduced gradient solve; identical iterates to :func:`solve_gradient`.

    ``penalty_rows`` is either a direct-form :class:`PenaltyMatrix` or a
    callable ``(l, out) -> out`` filling row l of the effective penalty D.
    Observation-matrix rows and columns are generated on the fly from ``u``.
    The trace reports the peak count of solver-owned workspace values
    (error vector, iterate/candidate/direction vectors, one observation row
    and one penalty row); provider-internal storage is the provider's.
    """
    opts = opts or SolverOptions()
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(u) != len(y):
        raise ValueError("u and y must have equal length")
    if isinstance(penalty_rows, PenaltyMatrix):
        if penalty_rows.form != "direct":
            raise ValueError("streaming solves need a direct-form penalty")
        provider = penalty_rows.row_into
    else:
        provider = penalty_rows
    n_theta = structure.n_theta
    meter = _AuxMeter()
    theta0 = (
        np.zeros(n_theta) if opts.theta0 is None else np.asarray(opts.theta0, float)
    )
    # The loop owns the iterate and candidate vectors; the direction vector
    # is owned (and metered) by the streaming ops.
    meter.values += 2 * n_theta
    trace = SolverTrace()
    if opts.warm_start_ls:
        ls_meter = _AuxMeter()
        ls_trace = SolverTrace()
        ls_ops = _StreamingOps(u, y, structure, _ZeroRowProvider(), ls_meter)
        theta0 = _descent_loop(ls_ops, theta0, opts, ls_trace)
        trace.warm_start_accepted = ls_trace.n_accepted
    ops = _StreamingOps(u, y, structure, provider, meter)
    theta = _descent_loop(ops, theta0, opts, trace)
    trace.aux_values_peak = meter.values
    return theta, trace


@dataclass(frozen=True)
class MemoryEstimate:
    values: int
    bytes: int


def estimate_memory(n_samples: int, n_theta: int, mode: str) -> MemoryEstimate:
    """Operational memory of a solve, in stored values and bytes (8 B each).

    ``matrix`` mode holds the observation matrix, its transpose products and
    the penalty: ``2 N n_theta + 3 n_theta^2 + N + n_theta`` values.
    ``reduced`` mode holds only vectors: ``N + 6 n_theta`` values.
    """
    if n_samples < 1 or n_theta < 1:
        raise ValueError("n_samples and n_theta must be >= 1")
    if mode == "matrix":
        values = 2 * n_samples * n_theta + 3 * n_theta * n_theta + n_samples + n_theta
    elif mode == "reduced":
        values = n_samples + 6 * n_theta
    else:
        raise ValueError(f"mode must be 'matrix' or 'reduced', got {mode!r}")
    return MemoryEstimate(values=values, bytes=values * BYTES_PER_VALUE)
