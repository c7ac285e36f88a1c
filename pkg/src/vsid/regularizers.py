"""Priors and penalties for regularized Volterra kernel estimation.

Smoothness/decay priors are expressed as covariance matrices over kernel
coefficients.  For first-order (impulse-response) blocks two families are
supported:

* DC (diagonal correlated): ``P(i, j) = c * rho**|i-j| * alpha**((i+j)/2)``
  with independent smoothness (rho) and decay (alpha) controls.
* TC (tuned correlated): the DC special case ``rho = sqrt(alpha)``, i.e.
  ``P(i, j) = c * alpha**max(i, j)``.

Higher-order kernels get the same structure applied along rotated
directions of the lag space (the main diagonal plus the orthogonal
in-plane directions), with absolute projections so that coefficient
variance does not depend on the ordering of a lag tuple.

The penalty entering the least-squares cost is ``D = noise_var * P^{-1}``.
Three inversion-avoiding representations are provided alongside the
assembled D: raw covariance blocks, an analytic bidiagonal filter factor F
with ``D = noise_var * F^T F``, and an analytic tridiagonal direct form R
with ``D = noise_var * R``.  Lag indices start at 0 throughout; the
round-trip identities ``F^T F P = I`` and ``R P = I`` pin the boundary
rows (tested, not trusted from any printed source).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ConditioningError
from .model import VolterraStructure

KIND_DC = "dc"
KIND_TC = "tc"
KINDS = (KIND_DC, KIND_TC)

# Diagonal jitter added before any covariance inversion: eps * trace(P) / n.
JITTER_EPS = 1e-10

# Prior directions per kernel order, unit-normalized.  Order 1 is the lag
# axis itself; order 2 uses the 45-degree rotated (u, v) frame; order 3 uses
# the main diagonal V and the two orthogonal in-plane directions U, Q.
_SQRT2 = math.sqrt(2.0)
_SQRT3 = math.sqrt(3.0)
_SQRT6 = math.sqrt(6.0)
DIRECTIONS = {
    1: np.array([[1.0]]),
    2: np.array(
        [
            [1.0 / _SQRT2, -1.0 / _SQRT2],  # u
            [1.0 / _SQRT2, 1.0 / _SQRT2],  # v
        ]
    ),
    3: np.array(
        [
            [1.0 / _SQRT3, 1.0 / _SQRT3, 1.0 / _SQRT3],  # V
            [1.0 / _SQRT2, -1.0 / _SQRT2, 0.0],  # U
            [-1.0 / _SQRT6, -1.0 / _SQRT6, 2.0 / _SQRT6],  # Q
        ]
    ),
}


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")


def _check_rho(rho: float, nonnegative: bool = False) -> None:
    if not -1.0 < rho < 1.0:
        raise ValueError(f"rho must be in (-1, 1), got {rho}")
    if nonnegative and rho < 0.0:
        raise ValueError(
            f"rho must be >= 0 for multidimensional priors "
            f"(fractional projection distances), got {rho}"
        )


def _check_c(c: float) -> None:
    if c < 0.0:
        raise ValueError(f"scale c must be >= 0, got {c}")


@dataclass(frozen=True)
class DirectionPrior:
    """Decay/smoothness pair along one prior direction."""

    alpha: float
    rho: float = 0.0

    def __post_init__(self):
        _check_alpha(self.alpha)
        _check_rho(self.rho)


@dataclass(frozen=True)
class OrderPrior:
    """Prior for one kernel order: scale, kind, and per-direction parameters.

    For the TC kind, rho is derived as sqrt(alpha) and the stored rho values
    are ignored.
    """

    c: float
    directions: tuple[DirectionPrior, ...]
    kind: str = KIND_DC

    def __post_init__(self):
        _check_c(self.c)
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.directions:
            raise ValueError("at least one direction is required")

    def effective_rhos(self) -> tuple[float, ...]:
        if self.kind == KIND_TC:
            return tuple(math.sqrt(d.alpha) for d in self.directions)
        return tuple(d.rho for d in self.directions)


@dataclass(frozen=True)
class HyperParameters:
    """All prior and noise parameters of an estimation problem.

    ``orders[m - 1]`` is the prior for kernel order m; direction counts must
    be 1, 2 and 3 for orders 1, 2 and 3.  ``p0_var`` is the offset variance
    (required when the structure includes an offset).
    """

    noise_var: float
    p0_var: float | None = None
    orders: tuple[OrderPrior, ...] = ()

    def __post_init__(self):
        if not self.noise_var > 0.0:
            raise ValueError(f"noise_var must be > 0, got {self.noise_var}")
        if self.p0_var is not None and self.p0_var < 0.0:
            raise ValueError(f"p0_var must be >= 0, got {self.p0_var}")
        for m, prior in enumerate(self.orders, start=1):
            if m > 3:
                raise ValueError("priors are defined for orders 1..3 only")
            if len(prior.directions) != m:
                raise ValueError(
                    f"order {m} prior needs {m} direction(s), "
                    f"got {len(prior.directions)}"
                )
            if m >= 2 and prior.kind == KIND_DC:
                for d in prior.directions:
                    _check_rho(d.rho, nonnegative=True)


def rotate_2d(tau1: float, tau2: float) -> tuple[float, float]:
    """Rotate lag coordinates 45 degrees counter-clockwise: (u, v) frame."""
    return (tau1 - tau2) / _SQRT2, (tau1 + tau2) / _SQRT2


def dc_covariance_1d(c1: float, alpha: float, rho: float, n: int) -> np.ndarray:
    """DC covariance over lags 0..n-1: ``c1 * rho**|i-j| * alpha**((i+j)/2)``."""
    _check_c(c1)
    _check_alpha(alpha)
    _check_rho(rho)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    i = np.arange(n, dtype=float)
    p = c1 * np.power(rho, np.abs(i[:, None] - i[None, :]))
    p *= np.power(alpha, (i[:, None] + i[None, :]) / 2.0)
    return np.triu(p) + np.triu(p, 1).T


def tc_covariance_1d(c1: float, alpha: float, n: int) -> np.ndarray:
    """TC covariance over lags 0..n-1: ``c1 * alpha**max(i, j)``."""
    _check_c(c1)
    _check_alpha(alpha)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    i = np.arange(n, dtype=float)
    p = c1 * np.power(alpha, np.maximum(i[:, None], i[None, :]))
    return np.triu(p) + np.triu(p, 1).T


def _projection_covariance(
    c: float,
    alphas: tuple[float, ...],
    rhos: tuple[float, ...],
    projections: np.ndarray,
) -> np.ndarray:
    """Product of DC kernels over absolute direction projections."""
    a = np.abs(projections)
    n = a.shape[0]
    p = np.full((n, n), c)
    for d in range(a.shape[1]):
        ad = a[:, d]
        p *= np.power(rhos[d], np.abs(ad[:, None] - ad[None, :]))
        p *= np.power(alphas[d], (ad[:, None] + ad[None, :]) / 2.0)
    return np.triu(p) + np.triu(p, 1).T


def _index_projections(index_map, m: int) -> np.ndarray:
    lags = np.array([list(lags) for lags, _ in index_map], dtype=float)
    return lags @ DIRECTIONS[m].T


def dc_covariance_2d(
    c2: float,
    rho_u: float,
    alpha_u: float,
    rho_v: float,
    alpha_v: float,
    index_map,
) -> np.ndarray:
    """Second-order covariance: DC kernels along the rotated u and v axes.

    ``index_map`` is the canonical (lag tuple, multiplicity) list of the
    order-2 block; the multiplicities are not used here.  Entries depend on
    lag tuples only through |u|, |v|, so permuted tuples get equal variance.
    """
    _check_c(c2)
    for alpha, rho in ((alpha_u, rho_u), (alpha_v, rho_v)):
        _check_alpha(alpha)
        _check_rho(rho, nonnegative=True)
    return _projection_covariance(
        c2, (alpha_u, alpha_v), (rho_u, rho_v), _index_projections(index_map, 2)
    )


def dc_covariance_3d(
    c3: float,
    rho_v: float,
    alpha_v: float,
    rho_u: float,
    alpha_u: float,
    rho_q: float,
    alpha_q: float,
    index_map,
) -> np.ndarray:
    """Third-order covariance: DC kernels along the V, U and Q directions.

    V is the main diagonal (1,1,1); U and Q span the orthogonal plane.
    Defined on the canonical sorted lag tuples of the order-3 block.
    """
    _check_c(c3)
    for alpha, rho in ((alpha_v, rho_v), (alpha_u, rho_u), (alpha_q, rho_q)):
        _check_alpha(alpha)
        _check_rho(rho, nonnegative=True)
    return _projection_covariance(
        c3,
        (alpha_v, alpha_u, alpha_q),
        (rho_v, rho_u, rho_q),
        _index_projections(index_map, 3),
    )


def covariance_for_order(prior: OrderPrior, m: int, index_map) -> np.ndarray:
    """Covariance block for order m from its prior."""
    rhos = prior.effective_rhos()
    alphas = tuple(d.alpha for d in prior.directions)
    if m == 1:
        n = len(index_map)
        if prior.kind == KIND_TC:
            return tc_covariance_1d(prior.c, alphas[0], n)
        return dc_covariance_1d(prior.c, alphas[0], rhos[0], n)
    if m == 2:
        return dc_covariance_2d(
            prior.c, rhos[0], alphas[0], rhos[1], alphas[1], index_map
        )
    if m == 3:
        return dc_covariance_3d(
            prior.c,
            rhos[0],
            alphas[0],
            rhos[1],
            alphas[1],
            rhos[2],
            alphas[2],
            index_map,
        )
    raise ValueError(f"no covariance construction for order {m}")


def build_covariance_blocks(
    structure: VolterraStructure, hp: HyperParameters
) -> dict[int, np.ndarray]:
    """Covariance blocks matching the parameter layout, keyed by order."""
    if len(hp.orders) < structure.max_degree:
        raise ValueError(
            f"hyperparameters cover orders 1..{len(hp.orders)} but the "
            f"structure has max degree {structure.max_degree}"
        )
    blocks: dict[int, np.ndarray] = {}
    if structure.include_offset:
        if hp.p0_var is None:
            raise ValueError("structure has an offset but p0_var is not set")
        blocks[0] = np.array([[hp.p0_var]])
    for m in structure.orders:
        blocks[m] = covariance_for_order(
            hp.orders[m - 1], m, structure.index_maps[m]
        )
    return blocks


def _jittered(p: np.ndarray) -> tuple[np.ndarray, float]:
    jitter = JITTER_EPS * np.trace(p) / p.shape[0]
    return p + jitter * np.eye(p.shape[0]), jitter


def _spd_inverse(p: np.ndarray, label: str) -> np.ndarray:
    try:
        factor = scipy.linalg.cho_factor(p, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise ConditioningError(f"{label} is numerically singular") from exc
    inv = scipy.linalg.cho_solve(factor, np.eye(p.shape[0]))
    return (inv + inv.T) / 2.0


def _block_slices_from_sizes(sizes: dict[int, int]) -> dict[int, slice]:
    slices = {}
    start = 0
    for key in sorted(sizes):
        slices[key] = slice(start, start + sizes[key])
        start += sizes[key]
    return slices


@dataclass
class PenaltyMatrix:
    """The quadratic penalty in one of four interchangeable representations.

    form = "covariance": raw prior blocks P; the penalty is
        ``noise_var * blkdiag(P)^{-1}`` (inverted on demand).
    form = "assembled": the dense penalty D itself.
    form = "filter": an analytic block-bidiagonal factor F (per-order scale
        folded in) with penalty ``noise_var * F^T F``.
    form = "direct": analytic tridiagonal first-order blocks plus dense
        higher-order inverse blocks; penalty ``noise_var * R``, exposable
        row by row without materializing R.
    """

    form: str
    noise_var: float
    block_slices: dict[int, slice]
    blocks: dict[int, np.ndarray] | None = None
    dense: np.ndarray | None = None
    filter_factor: np.ndarray | None = None
    direct_blocks: dict[int, object] | None = None
    jitter: dict[int, float] = field(default_factory=dict)
    _dense_cache: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_theta(self) -> int:
        return max(s.stop for s in self.block_slices.values())

    def dense_d(self) -> np.ndarray:
        """The effective penalty D as a dense matrix."""
        if self.form == "assembled":
            return self.dense
        if self._dense_cache is not None:
            return self._dense_cache
        if self.form == "covariance":
            d = assemble_penalty(self.blocks, self.noise_var).dense
        elif self.form == "filter":
            f = self.filter_factor
            d = self.noise_var * (f.T @ f)
        elif self.form == "direct":
            # row_into already carries the noise-variance scale.
            d = np.zeros((self.n_theta, self.n_theta))
            out = np.empty(self.n_theta)
            for l in range(self.n_theta):
                d[l] = self.row_into(l, out)
        else:
            raise ValueError(f"unknown penalty form {self.form!r}")
        self._dense_cache = d
        return d

    def dense_r(self) -> np.ndarray:
        """The direct-form R itself (inverse covariance, no noise scaling)."""
        if self.form != "direct":
            raise ValueError("dense_r is only defined for the direct form")
        return self.dense_d() / self.noise_var

    def row_into(self, l: int, out: np.ndarray) -> np.ndarray:
        """Write row ``l`` of the effective penalty D into ``out``.

        Only the direct form supports this; first-order blocks are generated
        from the closed tridiagonal form, other blocks are copied from the
        inverses materialized at build time.
        """
        if self.form != "direct":
            raise ValueError("row access is only defined for the direct form")
        out[:] = 0.0
        for key, sl in self.block_slices.items():
            if sl.start <= l < sl.stop:
                spec = self.direct_blocks[key]
                i = l - sl.start
                if isinstance(spec, np.ndarray):
                    out[sl] = spec[i]
                else:
                    c, alpha, rho, n = spec
                    _dc_direct_row(c, alpha, rho, n, i, out[sl])
                out[sl] *= self.noise_var
                return out
        raise IndexError(f"row {l} out of range")

    def penalty_cost(self, theta: np.ndarray) -> float:
        """theta' D theta evaluated in the native representation."""
        if self.form == "filter":
            ftheta = self.filter_factor @ theta
            return self.noise_var * float(ftheta @ ftheta)
        return float(theta @ self.penalty_grad(theta))

    def penalty_grad(self, theta: np.ndarray) -> np.ndarray:
        """D theta evaluated in the native representation."""
        if self.form == "filter":
            f = self.filter_factor
            return self.noise_var * (f.T @ (f @ theta))
        return self.dense_d() @ theta


def assemble_penalty(
    blocks: dict[int, np.ndarray], noise_var: float
) -> PenaltyMatrix:
    """Assemble ``D = noise_var * blkdiag(P_blocks)^{-1}`` block by block.

    A deterministic diagonal jitter of ``JITTER_EPS * trace(P)/n`` is added
    to each block before inversion; blocks that remain singular raise
    :class:`ConditioningError` naming the offending block.
    """
    if not noise_var > 0.0:
        raise ValueError(f"noise_var must be > 0, got {noise_var}")
    keys = sorted(blocks)
    slices = _block_slices_from_sizes({k: blocks[k].shape[0] for k in keys})
    n_total = max(s.stop for s in slices.values())
    dense = np.zeros((n_total, n_total))
    jitters = {}
    for key in keys:
        p, jit = _jittered(np.asarray(blocks[key], dtype=float))
        jitters[key] = jit
        dense[slices[key], slices[key]] = noise_var * _spd_inverse(
            p, f"covariance block {key}"
        )
    return PenaltyMatrix(
        form="assembled",
        noise_var=noise_var,
        block_slices=slices,
        dense=dense,
        jitter=jitters,
    )


def _effective_rho(kind: str, alpha: float, rho: float) -> float:
    if kind == KIND_TC:
        return math.sqrt(alpha)
    if kind == KIND_DC:
        return rho
    raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")


def filter_factor_1d(kind: str, alpha: float, rho: float, n: int) -> np.ndarray:
    """Upper-bidiagonal factor F of the unit-scale first-order penalty.

    ``F^T F`` equals the inverse of the c=1 DC/TC covariance exactly: the
    interior rows whiten the lag-domain correlation, the last row carries
    only the decay normalization.
    """
    _check_alpha(alpha)
    if not alpha > 0.0:
        raise ValueError("alpha must be > 0 for an invertible covariance")
    _check_rho(rho)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rho = _effective_rho(kind, alpha, rho)
    f = np.zeros((n, n))
    f[n - 1, n - 1] = alpha ** (-(n - 1) / 2.0)
    scale = 1.0 - rho * rho
    for i in range(n - 1):
        f[i, i] = 1.0 / math.sqrt(alpha**i * scale)
        f[i, i + 1] = -rho / math.sqrt(alpha ** (i + 1) * scale)
    return f


def _dc_direct_row(
    c: float, alpha: float, rho: float, n: int, i: int, out: np.ndarray
) -> None:
    """Row i of the tridiagonal inverse of the n x n DC covariance."""
    out[:] = 0.0
    if n == 1:
        out[0] = 1.0 / c
        return
    denom = c * (1.0 - rho * rho)
    if i == 0:
        out[0] = 1.0 / denom
    elif i == n - 1:
        out[i] = 1.0 / (denom * alpha ** (n - 1))
    else:
        out[i] = (1.0 + rho * rho) / (denom * alpha**i)
    if i > 0:
        out[i - 1] = -rho / (denom * alpha ** (i - 0.5))
    if i < n - 1:
        out[i + 1] = -rho / (denom * alpha ** (i + 0.5))


def direct_penalty_1d(
    kind: str, c1: float, alpha: float, rho: float, n: int
) -> np.ndarray:
    """Tridiagonal inverse of the first-order DC/TC covariance (c included).

    Satisfies ``R @ P = I`` exactly in exact arithmetic; off-diagonal
    entries are nonpositive for rho >= 0.
    """
    if not c1 > 0.0:
        raise ValueError(f"c1 must be > 0, got {c1}")
    _check_alpha(alpha)
    if not alpha > 0.0:
        raise ValueError("alpha must be > 0 for an invertible covariance")
    _check_rho(rho)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rho = _effective_rho(kind, alpha, rho)
    r = np.zeros((n, n))
    for i in range(n):
        _dc_direct_row(c1, alpha, rho, n, i, r[i])
    return r


def multidim_direct_penalty(
    m: int, prior: OrderPrior, index_map
) -> np.ndarray:
    """Inverse covariance block for order m in {2, 3}, materialized densely.

    Built by explicit (jittered) inversion once; rows are then available for
    the streaming path without further factorizations.
    """
    if m not in (2, 3):
        raise ValueError(f"multidimensional penalty is defined for m in 2..3, got {m}")
    p = covariance_for_order(prior, m, index_map)
    p, _ = _jittered(p)
    return _spd_inverse(p, f"order-{m} covariance")


def build_penalty(structure: VolterraStructure, hp: HyperParameters) -> PenaltyMatrix:
    """Assembled-D penalty for a structure from its hyperparameters."""
    return assemble_penalty(build_covariance_blocks(structure, hp), hp.noise_var)


def build_covariance_penalty(
    structure: VolterraStructure, hp: HyperParameters
) -> PenaltyMatrix:
    """Covariance-form penalty (blocks kept, inversion deferred)."""
    blocks = build_covariance_blocks(structure, hp)
    slices = _block_slices_from_sizes({k: b.shape[0] for k, b in blocks.items()})
    return PenaltyMatrix(
        form="covariance",
        noise_var=hp.noise_var,
        block_slices=slices,
        blocks=blocks,
    )


def build_filter_penalty(
    structure: VolterraStructure, hp: HyperParameters
) -> PenaltyMatrix:
    """Filter-form penalty: analytic F with per-block scale folded in.

    Only offset and first-order blocks have an analytic factor; structures
    with higher orders are rejected (factorizing those at runtime is
    numerically unsafe and deliberately unsupported).
    """
    if structure.max_degree > 1:
        raise ValueError(
            "filter-form penalties exist for offset/first-order structures only"
        )
    blocks = build_covariance_blocks(structure, hp)
    slices = _block_slices_from_sizes({k: b.shape[0] for k, b in blocks.items()})
    n_total = max(s.stop for s in slices.values())
    f = np.zeros((n_total, n_total))
    if structure.include_offset:
        if not hp.p0_var > 0.0:
            raise ConditioningError("offset variance must be > 0 for the filter form")
        f[slices[0], slices[0]] = 1.0 / math.sqrt(hp.p0_var)
    if structure.max_degree == 1:
        prior = hp.orders[0]
        if not prior.c > 0.0:
            raise ConditioningError("order-1 scale c must be > 0 for the filter form")
        d = prior.directions[0]
        f1 = filter_factor_1d(prior.kind, d.alpha, d.rho, structure.memory[0])
        f[slices[1], slices[1]] = f1 / math.sqrt(prior.c)
    return PenaltyMatrix(
        form="filter",
        noise_var=hp.noise_var,
        block_slices=slices,
        filter_factor=f,
    )


def build_direct_penalty(
    structure: VolterraStructure, hp: HyperParameters
) -> PenaltyMatrix:
    """Direct-form penalty: analytic tridiagonal order-1 block, dense inverses
    for orders 2..3, offset as a scalar block."""
    blocks_spec: dict[int, object] = {}
    sizes: dict[int, int] = {}
    jitters: dict[int, float] = {}
    if structure.include_offset:
        if hp.p0_var is None or not hp.p0_var > 0.0:
            raise ConditioningError("offset variance must be > 0 for the direct form")
        blocks_spec[0] = np.array([[1.0 / hp.p0_var]])
        sizes[0] = 1
    for m in structure.orders:
        prior = hp.orders[m - 1]
        n_m = structure.memory[m - 1]
        if m == 1:
            if not prior.c > 0.0:
                raise ConditioningError("order-1 scale c must be > 0 for the direct form")
            d = prior.directions[0]
            rho = _effective_rho(prior.kind, d.alpha, d.rho)
            if not d.alpha > 0.0:
                raise ConditioningError("order-1 alpha must be > 0 for the direct form")
            blocks_spec[1] = (prior.c, d.alpha, rho, n_m)
            sizes[1] = n_m
        else:
            blocks_spec[m] = multidim_direct_penalty(
                m, prior, structure.index_maps[m]
            )
            sizes[m] = blocks_spec[m].shape[0]
    return PenaltyMatrix(
        form="direct",
        noise_var=hp.noise_var,
        block_slices=_block_slices_from_sizes(sizes),
        direct_blocks=blocks_spec,
        jitter=jitters,
    )
