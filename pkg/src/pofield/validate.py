"""Self-check suites run by ``pofield validate``.

Each check compares a statistic against a bound derived from an
independent oracle (dense algebra, known moments, finite differences).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import linop as lo
from .oracles import dense_moments
from .po import FactorModel, GaussianFactor, criterion_gradient, perturb, po_sample
from .rng import RandomStream
from .solver import SolveConfig, conjugate_gradient

SUITES = ("linop", "rng", "solver", "po")


@dataclass
class Check:
    name: str
    statistic: float
    bound: float
    passed: bool

    def to_dict(self):
        d = asdict(self)
        d["passed"] = bool(d["passed"])
        return d


def _le(name, stat, bound):
    return Check(name, float(stat), float(bound), bool(stat <= bound))


def random_operators(rng: np.random.Generator, shape=(8, 8)) -> dict[str, lo.LinearOperator]:
    """One operator of every kind on an image grid of ``shape``."""
    n = shape[0] * shape[1]
    conv = lo.CirculantConv2D(rng.standard_normal((3, 5)), shape)
    dec = lo.Decimate2D(shape, 2, (1, 0))
    lap = lo.Laplacian2D(shape)
    dense = lo.DenseOperator(rng.standard_normal((n // 2, n)))
    return {
        "dense": dense,
        "identity": lo.Identity(n),
        "scaled_identity": lo.ScaledIdentity(n, float(rng.uniform(0.5, 3))),
        "diagonal": lo.Diagonal(rng.uniform(0.5, 2, n)),
        "circulant_conv2d": conv,
        "decimate2d": dec,
        "laplacian2d": lap,
        "composition": lo.Composition(dec, conv),
        "sum": lo.Sum([conv, lap, lo.ScaledIdentity(n, 0.3)]),
        "stack": lo.Stack([dec, lo.Decimate2D(shape, 2, (0, 1)), conv]),
        "adjoint": conv.T,
    }


def adjoint_gap(op: lo.LinearOperator, x, y) -> float:
    """``|<Ax, y> - <x, A^t y>|`` relative to ``||Ax|| ||y||``."""
    ax = op.apply(x)
    lhs = float(ax @ y)
    rhs = float(x @ op.apply_adjoint(y))
    return abs(lhs - rhs) / (np.linalg.norm(ax) * np.linalg.norm(y) + 1e-300)


def random_model(rng: np.random.Generator, n: int, K: int, means: bool = False) -> FactorModel:
    """Random positive definite factor model with dense factors.

    Factor 0 is tall (``(n + 4) x n``) so ``Q`` is definite for any ``K``.
    """
    factors = []
    for k in range(K):
        d = n + 4 if k == 0 else int(rng.integers(max(1, n // 2), n + 1))
        M = lo.DenseOperator(rng.standard_normal((d, n)) / math.sqrt(n))
        r = rng.uniform(0.5, 2.0, d)
        m = rng.standard_normal(d) if means else None
        factors.append(GaussianFactor(M, r, m))
    return FactorModel(factors)


def covariance_excess(samples: np.ndarray, C: np.ndarray) -> float:
    """Largest ``|C_hat - C| / sqrt((C_ii C_jj + C_ij^2) / S)`` over entries."""
    S = samples.shape[0]
    C_hat = np.cov(samples, rowvar=False)
    d = np.diag(C)
    sigma = np.sqrt((np.outer(d, d) + C**2) / S)
    return float(np.max(np.abs(C_hat - C) / sigma))


def mean_excess(samples: np.ndarray, mean: np.ndarray, C: np.ndarray) -> float:
    """Largest ``|mean_hat - mean| / sqrt(C_ii / S)``."""
    S = samples.shape[0]
    return float(np.max(np.abs(samples.mean(axis=0) - mean) / np.sqrt(np.diag(C) / S)))


def po_draws(model: FactorModel, stream: RandomStream, S: int, cfg: SolveConfig) -> np.ndarray:
    out = np.empty((S, model.n))
    for s in range(S):
        out[s], _ = po_sample(model, stream, cfg)
    return out


def suite_linop(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    for name, op in random_operators(rng).items():
        worst = 0.0
        for _ in range(100):
            worst = max(worst, adjoint_gap(op, rng.standard_normal(op.in_dim), rng.standard_normal(op.out_dim)))
        checks.append(_le(f"adjoint identity [{name}]", worst, 1e-10))
    shape = (8, 8)
    kernel = rng.standard_normal((3, 3))
    conv = lo.CirculantConv2D(kernel, shape)
    A = _dense_circulant(kernel, shape)
    x = rng.standard_normal(64)
    checks.append(_le("FFT convolution vs dense circulant", np.linalg.norm(conv.apply(x) - A @ x) / np.linalg.norm(A @ x), 1e-10))
    L = lo.to_dense(lo.Laplacian2D(shape))
    checks.append(_le("Laplacian symmetry", np.max(np.abs(L - L.T)), 0.0))
    checks.append(_le("Laplacian annihilates constants", np.max(np.abs(L @ np.ones(64))), 1e-12))
    model = random_model(rng, 16, 2)
    Q = model.precision
    worst = 0.0
    for _ in range(100):
        v = rng.standard_normal(16)
        worst = max(worst, -float(v @ Q.apply(v)) / float(v @ v))
    checks.append(_le("Gram positivity (-x'Qx/||x||^2)", worst, 1e-10))
    return checks


def _dense_circulant(kernel, shape):
    """Circulant matrix built entry by entry from the centered kernel."""
    rows, cols = shape
    kr, kc = kernel.shape
    A = np.zeros((rows * cols, rows * cols))
    for i in range(rows):
        for j in range(cols):
            for a in range(kr):
                for b in range(kc):
                    si = (i - (a - kr // 2)) % rows
                    sj = (j - (b - kc // 2)) % cols
                    A[i * cols + j, si * cols + sj] += kernel[a, b]
    return A


def suite_rng(seed: int) -> list[Check]:
    stream = RandomStream(seed)
    z = stream.substream(0).standard_normal_vec(10**6)
    checks = [
        _le("normal mean |m|", abs(z.mean()), 0.004),
        _le("normal variance |v - 1|", abs(z.var() - 1.0), 0.006),
    ]
    a = RandomStream(seed).substream(0).standard_normal_vec(100)
    checks.append(_le("same seed, same draws (max diff)", np.max(np.abs(a - z[:100])), 0.0))
    g = stream.substream(1).gamma_vec(3.0, 2.0, 10**5)
    checks.append(_le("gamma(3, 2) mean |m - 6|", abs(g.mean() - 6.0), 0.15))
    e = stream.substream(2).gamma_vec(1.0, 1.0, 10**5)
    checks.append(_le("gamma(1, 1) median |m - ln 2|", abs(np.median(e) - math.log(2)), 0.02))
    return checks


def suite_solver(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst_err, worst_ratio = 0.0, 0.0
    for _ in range(50):
        n = int(rng.integers(2, 65))
        B = rng.standard_normal((n, n))
        A = B @ B.T + n * np.eye(n)
        b = rng.standard_normal(n)
        x, rep = conjugate_gradient(lo.DenseOperator(A), b, cfg=SolveConfig(rel_tol=1e-12, abs_tol=1e-300))
        ref = np.linalg.solve(A, b)
        worst_err = max(worst_err, np.linalg.norm(x - ref) / np.linalg.norm(ref))
        worst_ratio = max(worst_ratio, rep.iterations / n if rep.converged else np.inf)
    return [
        _le("CG vs dense solve (relative error)", worst_err, 1e-7),
        _le("CG iterations / n at tol 1e-12", worst_ratio, 1.0),
    ]


def suite_po(seed: int, n_samples: int = 20000) -> list[Check]:
    rng = np.random.default_rng(seed)
    stream = RandomStream(seed)
    checks = []
    worst = 0.0
    tight = SolveConfig(rel_tol=1e-10, abs_tol=1e-300)
    for i in range(10):
        model = random_model(rng, int(rng.choice([8, 16])), int(rng.integers(1, 4)), means=bool(i % 2))
        zetas = perturb(model, stream.substream(100 + i))
        ref = np.linalg.solve(_dense(model), model.rhs(zetas))
        x, _ = conjugate_gradient(model.precision, model.rhs(zetas), cfg=tight)
        worst = max(worst, np.linalg.norm(x - ref) / np.linalg.norm(ref))
    checks.append(_le("PO minimizer vs dense Q^-1 b (relative)", worst, 1e-6))

    model = random_model(rng, 8, 2)
    zetas = perturb(model, stream.substream(200))
    x = rng.standard_normal(8)
    g = criterion_gradient(model, x, zetas)
    fd = _fd_gradient(model, x, zetas)
    checks.append(_le("criterion gradient vs central differences", np.linalg.norm(g - fd) / np.linalg.norm(fd), 1e-5))

    model = random_model(rng, 16, 2, means=True)
    mean, C = dense_moments(model)
    draws = po_draws(model, stream.substream(300), n_samples, SolveConfig(rel_tol=1e-8))
    checks.append(_le("covariance excess (units of 5 sigma)", covariance_excess(draws, C) / 5.0, 1.0))
    checks.append(_le("mean excess (units of 4 sigma)", mean_excess(draws, mean, C) / 4.0, 1.0))
    return checks


def _dense(model):
    return lo.to_dense(model.precision)


def _fd_gradient(model, x, zetas, h=1e-5):
    from .po import criterion_value

    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (criterion_value(model, x + e, zetas) - criterion_value(model, x - e, zetas)) / (2 * h)
    return g


def run_suite(name: str, seed: int) -> list[Check]:
    if name == "all":
        return [c for s in SUITES for c in run_suite(s, seed)]
    fn = {"linop": suite_linop, "rng": suite_rng, "solver": suite_solver, "po": suite_po}.get(name)
    if fn is None:
        raise ValueError(f"unknown suite {name!r}")
    return [Check(f"{name}: {c.name}", c.statistic, c.bound, c.passed) for c in fn(seed)]
