"""Matrix-free conjugate gradient for symmetric positive (semi)definite systems."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DimensionError, IndefiniteError, SolverError
from .linop import LinearOperator


@dataclass(frozen=True)
class SolveConfig:
    """Stopping rule ``||Qx - b|| <= max(rel_tol * ||b||, abs_tol)``.

    ``max_iter=None`` means the problem dimension.  ``indefinite_tol``
    bounds how negative ``p'Qp / ||p||^2`` may get before the operator is
    declared indefinite.
    """

    rel_tol: float = 1e-8
    abs_tol: float = 1e-12
    max_iter: Optional[int] = None
    record_residuals: bool = False
    indefinite_tol: float = 1e-12

    def __post_init__(self):
        if not 0 < self.rel_tol < 1:
            raise ValueError(f"rel_tol must lie in (0, 1), got {self.rel_tol}")
        if not self.abs_tol > 0:
            raise ValueError(f"abs_tol must be positive, got {self.abs_tol}")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError(f"max_iter must be positive, got {self.max_iter}")


@dataclass
class SolveReport:
    iterations: int
    final_residual_norm: float
    converged: bool
    threshold: float
    residual_history: Optional[np.ndarray] = field(default=None, repr=False)


def conjugate_gradient(
    Q: LinearOperator,
    b,
    x0=None,
    cfg: Optional[SolveConfig] = None,
    preconditioner: Optional[LinearOperator] = None,
    callback: Optional[Callable[[np.ndarray], None]] = None,
):
    """Solve ``Q x = b`` by (optionally preconditioned) conjugate gradient.

    Args:
        Q: self-adjoint, positive (semi)definite operator.
        b: right-hand side.
        x0: warm start; zero when omitted.
        cfg: stopping rule.
        preconditioner: self-adjoint positive operator approximating Q^{-1}.
        callback: called with each new iterate (not with x0).

    Returns:
        ``(x, report)``.  Hitting ``max_iter`` is not an error; check
        ``report.converged``.

    Raises:
        SolverError: non-finite values or zero curvature on a nonzero residual.
        IndefiniteError: ``p'Qp < -indefinite_tol * ||p||^2``.
    """
    cfg = cfg or SolveConfig()
    n = Q.in_dim
    if Q.out_dim != n:
        raise DimensionError(f"CG needs a square operator, got {Q.shape}")
    b = np.asarray(b, dtype=float)
    if b.shape != (n,):
        raise DimensionError(f"rhs has shape {b.shape}, expected ({n},)")
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if x.shape != (n,):
        raise DimensionError(f"x0 has shape {x.shape}, expected ({n},)")
    max_iter = n if cfg.max_iter is None else cfg.max_iter

    threshold = max(cfg.rel_tol * float(np.linalg.norm(b)), cfg.abs_tol)
    r = b - Q.apply(x)
    rnorm = float(np.linalg.norm(r))
    history = [rnorm] if cfg.record_residuals else None
    if not np.isfinite(rnorm):
        raise SolverError("non-finite initial residual", iterations=0)

    def _precond(v):
        return v if preconditioner is None else preconditioner.apply(v)

    it = 0
    while True:
        if rnorm <= threshold:
            # recursive residual can drift; confirm against the true one
            r = b - Q.apply(x)
            rnorm = float(np.linalg.norm(r))
            if rnorm <= threshold or it >= max_iter:
                break
        if it >= max_iter:
            break
        z = _precond(r)
        rz = float(r @ z)
        p = z.copy()
        while it < max_iter:
            Qp = Q.apply(p)
            curv = float(p @ Qp)
            pp = float(p @ p)
            if not np.isfinite(curv):
                raise SolverError(f"non-finite curvature at iteration {it}", iterations=it)
            if curv < -cfg.indefinite_tol * pp:
                raise IndefiniteError(f"negative curvature p'Qp={curv:.3e} at iteration {it}", iterations=it)
            if curv <= 0.0:
                raise SolverError(f"zero curvature on a nonzero residual at iteration {it}", iterations=it)
            alpha = rz / curv
            x += alpha * p
            r -= alpha * Qp
            it += 1
            rnorm = float(np.linalg.norm(r))
            if not np.isfinite(rnorm):
                raise SolverError(f"non-finite residual at iteration {it}", iterations=it)
            if history is not None:
                history.append(rnorm)
            if callback is not None:
                callback(x.copy())
            if rnorm <= threshold:
                break
            z = _precond(r)
            rz_new = float(r @ z)
            p = z + (rz_new / rz) * p
            rz = rz_new
        # outer loop re-checks the true residual and restarts if needed

    return x, SolveReport(
        iterations=it,
        final_residual_norm=rnorm,
        converged=rnorm <= threshold,
        threshold=threshold,
        residual_history=None if history is None else np.asarray(history),
    )


def write_residual_history(report: SolveReport, path) -> None:
    """Write ``iteration,residual_norm`` rows; iteration 0 is the initial residual."""
    if report.residual_history is None:
        raise ValueError("report has no residual history; solve with record_residuals=True")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "residual_norm"])
        for i, v in enumerate(report.residual_history):
            w.writerow([i, repr(float(v))])
