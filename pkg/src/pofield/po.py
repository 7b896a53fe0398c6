"""Perturbation-Optimization sampling of Gaussian fields.

The target is ``N(Q^{-1} sum_k M_k^t R_k^{-1} m_k, Q^{-1})`` with precision
``Q = sum_k M_k^t R_k^{-1} M_k``.  A draw is obtained by perturbing each data
term, ``zeta_k ~ N(m_k, R_k)``, and minimizing the quadratic criterion

    J(x | zeta) = sum_k (zeta_k - M_k x)^t R_k^{-1} (zeta_k - M_k x)

whose minimizer solves ``Q x = sum_k M_k^t R_k^{-1} zeta_k``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, SolverError
from .linop import Identity, LinearOperator, gram_operator
from .rng import RandomStream
from .solver import SolveConfig, SolveReport, conjugate_gradient


@dataclass(frozen=True)
class GaussianFactor:
    """One data term ``(M, R, m)``; ``R`` is diagonal.

    ``r_diag`` may be a scalar (``alpha * I``) or a vector of length
    ``M.out_dim``.  ``m`` defaults to zero.
    """

    M: LinearOperator
    r_diag: np.ndarray | float = 1.0
    m: Optional[np.ndarray] = None

    def __post_init__(self):
        d = self.M.out_dim
        r = np.asarray(self.r_diag, dtype=float)
        if r.ndim == 0:
            r = np.full(1, float(r))
        elif r.shape != (d,):
            raise DimensionError(f"r_diag has shape {r.shape}, expected scalar or ({d},)")
        if not np.all(np.isfinite(r)) or np.any(r <= 0):
            raise ValueError("r_diag entries must be finite and strictly positive")
        m = np.zeros(d) if self.m is None else np.asarray(self.m, dtype=float)
        if m.shape != (d,):
            raise DimensionError(f"mean has shape {m.shape}, expected ({d},)")
        r.setflags(write=False)
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "r_diag", r)
        object.__setattr__(self, "m", m)

    @property
    def dim(self) -> int:
        return self.M.out_dim

    @property
    def std(self) -> np.ndarray:
        """Per-entry standard deviation, broadcastable to ``dim``."""
        return np.sqrt(self.r_diag)

    @property
    def inv_r(self) -> np.ndarray:
        return 1.0 / self.r_diag


class FactorModel:
    """Ordered, immutable list of factors sharing the input dimension."""

    def __init__(self, factors: Sequence[GaussianFactor]):
        factors = tuple(factors)
        if not factors:
            raise DimensionError("a factor model needs at least one factor")
        n = factors[0].M.in_dim
        for k, f in enumerate(factors):
            if f.M.in_dim != n:
                raise DimensionError(f"factor {k} has in_dim {f.M.in_dim}, expected {n}")
        self.factors = factors
        self.n = n
        self.precision = gram_operator(factors)

    def __len__(self):
        return len(self.factors)

    def __iter__(self):
        return iter(self.factors)

    def rhs(self, zetas) -> np.ndarray:
        """``sum_k M_k^t R_k^{-1} zeta_k``."""
        self._check(zetas)
        out = np.zeros(self.n)
        for f, z in zip(self.factors, zetas):
            out += f.M.apply_adjoint(f.inv_r * z)
        return out

    def mean_rhs(self) -> np.ndarray:
        """``sum_k M_k^t R_k^{-1} m_k``; the target mean is ``Q^{-1}`` of this."""
        return self.rhs([f.m for f in self.factors])

    def _check(self, zetas):
        if len(zetas) != len(self.factors):
            raise DimensionError(f"expected {len(self.factors)} perturbation vectors, got {len(zetas)}")
        for k, (f, z) in enumerate(zip(self.factors, zetas)):
            if np.shape(z) != (f.dim,):
                raise DimensionError(f"perturbation {k} has shape {np.shape(z)}, expected ({f.dim},)")

    def __repr__(self):
        return f"FactorModel(n={self.n}, K={len(self.factors)})"


def perturb(model: FactorModel, stream: RandomStream) -> list[np.ndarray]:
    """Draw ``zeta_k ~ N(m_k, R_k)`` for every factor.

    Factor ``k`` draws from ``stream.substream(k)``, so adding a factor
    leaves the earlier factors' draws unchanged.
    """
    return [f.m + f.std * stream.substream(k).standard_normal_vec(f.dim) for k, f in enumerate(model.factors)]


def criterion_value(model: FactorModel, x, zetas) -> float:
    x = _check_x(model, x)
    model._check(zetas)
    total = 0.0
    for f, z in zip(model.factors, zetas):
        res = z - f.M.apply(x)
        total += float(res @ (f.inv_r * res))
    return total


def criterion_gradient(model: FactorModel, x, zetas) -> np.ndarray:
    """Gradient ``2 (Q x - b)`` with ``b = sum_k M_k^t R_k^{-1} zeta_k``."""
    x = _check_x(model, x)
    return 2.0 * (model.precision.apply(x) - model.rhs(zetas))


def _check_x(model, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n,):
        raise DimensionError(f"x has shape {x.shape}, expected ({model.n},)")
    return x


def minimize_criterion(model: FactorModel, zetas, cfg: Optional[SolveConfig] = None, x0=None):
    """Minimize J(. | zetas) by CG on the normal equations."""
    try:
        return conjugate_gradient(model.precision, model.rhs(zetas), x0=x0, cfg=cfg)
    except SolverError as err:
        err.perturbation = zetas
        raise


def po_sample(
    model: FactorModel, stream: RandomStream, cfg: Optional[SolveConfig] = None, x0=None
) -> tuple[np.ndarray, SolveReport]:
    """One Perturbation-Optimization draw.

    Args:
        model: positive definite factor model.
        stream: random source; advanced by one draw per factor.
        cfg: CG stopping rule.
        x0: CG warm start (zero by default).  It changes the iterate path
            but, at tight tolerance, not the distribution of the output.

    Raises:
        SolverError: with ``perturbation`` set to the drawn ``zeta`` list.
    """
    return minimize_criterion(model, perturb(model, stream), cfg=cfg, x0=x0)


def posterior_factor_model(
    H: LinearOperator,
    y,
    rn_diag=1.0,
    mn=None,
    prior_op: Optional[LinearOperator] = None,
    rx_diag=1.0,
    mx=None,
    gamma_x: Optional[float] = None,
) -> FactorModel:
    """K=2 model for ``p(x | y)`` under ``y = Hx + n``.

    Noise ``n ~ N(mn, Rn)`` gives the factor ``(H, Rn, y - mn)``.  The prior
    gives ``(prior_op, Rx, mx)``; with ``prior_op`` omitted this is the
    identity, i.e. ``x ~ N(mx, Rx)``.  Passing ``prior_op=D`` and
    ``gamma_x`` encodes the prior precision ``gamma_x * D^t D`` through a
    white factor ``R = I / gamma_x``.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (H.out_dim,):
        raise DimensionError(f"data has shape {y.shape}, expected ({H.out_dim},)")
    m1 = y if mn is None else y - np.asarray(mn, dtype=float)
    if prior_op is None:
        prior_op = Identity(H.in_dim)
    if gamma_x is not None:
        if gamma_x <= 0:
            raise ValueError("gamma_x must be positive")
        rx_diag = 1.0 / gamma_x
    return FactorModel([GaussianFactor(H, rn_diag, m1), GaussianFactor(prior_op, rx_diag, mx)])
