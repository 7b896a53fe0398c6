"""Unsupervised multi-frame super-resolution.

Observation model ``y = P C x + n`` with a shared periodic blur ``C``, one
decimation ``P_i`` per low-resolution frame, white noise of precision
``gamma_n`` and a Laplacian smoothness prior of precision ``gamma_x D^t D``.
Both precisions get Jeffreys priors; the joint posterior is explored by a
Gibbs sampler whose image step is a PO draw.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from statistics import NormalDist
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateConditionalError, DimensionError, SolverError
from .linop import CirculantConv2D, Composition, Decimate2D, ImageGrid, Laplacian2D, LinearOperator, Stack
from .oracles import exact_sample_dense
from .po import posterior_factor_model, po_sample
from .rng import RandomStream
from .solver import SolveConfig

SCHEMA_VERSION = 1

# substream keys under a chain's stream
GAMMA_STREAM = 0
IMAGE_STREAM = 1
NOISE_STREAM = 2


def gaussian_psf(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Truncated isotropic Gaussian, normalized to unit sum."""
    if size < 1 or size % 2 == 0:
        raise ValueError("psf size must be a positive odd integer")
    ax = np.arange(size) - size // 2
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    psf = np.outer(g, g)
    return psf / psf.sum()


def default_phases(n_frames: int, factor: int) -> list[tuple[int, int]]:
    """Cycle through the sub-pixel lattice, row offset varying fastest:
    (0,0), (1,0), (0,1), (1,1), (0,0), ... for factor 2."""
    lattice = [(r, c) for c in range(factor) for r in range(factor)]
    return [lattice[i % len(lattice)] for i in range(n_frames)]


@dataclass(frozen=True)
class SRConfig:
    hi_shape: tuple[int, int] = (64, 64)
    factor: int = 2
    n_frames: int = 4
    frame_phases: Optional[tuple[tuple[int, int], ...]] = None
    psf: Optional[np.ndarray] = field(default=None, compare=False)
    gamma_n_shape_offset: float = 1.0
    gamma_x_shape_offset: float = 1.0
    solver: SolveConfig = SolveConfig(rel_tol=1e-6)
    n_iter: int = 1000
    burn_in: Optional[int] = None
    warm_start: bool = True
    thin: int = 0

    def __post_init__(self):
        rows, cols = (int(s) for s in self.hi_shape)
        object.__setattr__(self, "hi_shape", (rows, cols))
        if self.factor < 1 or rows % self.factor or cols % self.factor:
            raise DimensionError(f"hi_shape {self.hi_shape} not divisible by factor {self.factor}")
        if self.n_frames < 1:
            raise ValueError("n_frames must be positive")
        phases = self.frame_phases
        if phases is None:
            phases = default_phases(self.n_frames, self.factor)
        phases = tuple(tuple(int(v) for v in p) for p in phases)
        if len(phases) != self.n_frames:
            raise DimensionError(f"{len(phases)} frame phases given for {self.n_frames} frames")
        for p in phases:
            if len(p) != 2 or not all(0 <= v < self.factor for v in p):
                raise DimensionError(f"frame phase {p} outside [0, {self.factor})^2")
        object.__setattr__(self, "frame_phases", phases)
        psf = gaussian_psf() if self.psf is None else np.array(self.psf, dtype=float)
        if psf.ndim != 2:
            raise DimensionError("psf must be 2-D")
        psf.setflags(write=False)
        object.__setattr__(self, "psf", psf)
        if self.n_iter < 1:
            raise ValueError("n_iter must be positive")
        burn_in = self.n_iter // 5 if self.burn_in is None else int(self.burn_in)
        if not 0 <= burn_in < self.n_iter:
            raise ValueError(f"burn_in must lie in [0, n_iter), got {burn_in}")
        object.__setattr__(self, "burn_in", burn_in)

    @property
    def n_pixels(self) -> int:
        return self.hi_shape[0] * self.hi_shape[1]

    @property
    def low_shape(self) -> tuple[int, int]:
        return (self.hi_shape[0] // self.factor, self.hi_shape[1] // self.factor)

    @property
    def n_data(self) -> int:
        return self.n_frames * self.low_shape[0] * self.low_shape[1]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "hi_shape": list(self.hi_shape),
            "factor": self.factor,
            "n_frames": self.n_frames,
            "frame_phases": [list(p) for p in self.frame_phases],
            "psf": self.psf.tolist(),
            "gamma_n_shape_offset": self.gamma_n_shape_offset,
            "gamma_x_shape_offset": self.gamma_x_shape_offset,
            "solver": asdict(self.solver),
            "n_iter": self.n_iter,
            "burn_in": self.burn_in,
            "warm_start": self.warm_start,
            "thin": self.thin,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SRConfig:
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported SR config schema_version {version}")
        psf = d.pop("psf", None)
        if isinstance(psf, dict):
            psf = gaussian_psf(int(psf.get("size", 5)), float(psf.get("sigma", 1.0)))
        solver = SolveConfig(**d.pop("solver", {"rel_tol": 1e-6}))
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown SR config keys: {sorted(unknown)}")
        if "hi_shape" in d:
            d["hi_shape"] = tuple(d["hi_shape"])
        return cls(psf=psf, solver=solver, **d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, **kw) -> SRConfig:
        kw = {k: v for k, v in kw.items() if v is not None}
        if "n_iter" in kw and "burn_in" not in kw and self.burn_in == self.n_iter // 5:
            kw["burn_in"] = None
        return replace(self, **kw)


def build_forward(cfg: SRConfig) -> LinearOperator:
    """``H = [P_1; ...; P_F] C``; the blur is shared, so it is applied once."""
    blur = CirculantConv2D(cfg.psf, cfg.hi_shape)
    decims = Stack([Decimate2D(cfg.hi_shape, cfg.factor, p) for p in cfg.frame_phases])
    return Composition(decims, blur)


def build_prior(cfg: SRConfig) -> LinearOperator:
    return Laplacian2D(cfg.hi_shape)


def _flat(x, n=None) -> np.ndarray:
    if isinstance(x, ImageGrid):
        x = x.values
    x = np.asarray(x, dtype=float).reshape(-1)
    if n is not None and x.size != n:
        raise DimensionError(f"expected {n} values, got {x.size}")
    return x


def simulate_data(cfg: SRConfig, x_true, gamma_n_true: float, stream: RandomStream, noiseless: bool = False) -> np.ndarray:
    """Stacked low-resolution frames ``H x_true + n``, ``n ~ N(0, I / gamma_n_true)``."""
    x = _flat(x_true, cfg.n_pixels)
    clean = build_forward(cfg).apply(x)
    if noiseless:
        return clean
    if not gamma_n_true > 0:
        raise ValueError("gamma_n_true must be positive")
    return clean + stream.standard_normal_vec(clean.size) / np.sqrt(gamma_n_true)


def split_frames(cfg: SRConfig, y) -> list[np.ndarray]:
    y = _flat(y, cfg.n_data)
    return [f.reshape(cfg.low_shape) for f in np.split(y, cfg.n_frames)]


def gamma_n_conditional(y, x, H: LinearOperator, shape_offset: float = 1.0) -> tuple[float, float]:
    """(shape, scale) of the noise-precision conditional."""
    r = np.asarray(y, dtype=float) - H.apply(x)
    s2 = float(r @ r)
    if not s2 > 0:
        raise DegenerateConditionalError("zero data residual: the gamma_n conditional is improper")
    return shape_offset + r.size / 2.0, 2.0 / s2


def gamma_x_conditional(x, D: LinearOperator, shape_offset: float = 1.0) -> tuple[float, float]:
    """(shape, scale) of the prior-precision conditional.  ``D`` loses one
    dimension (constants), hence ``(N - 1) / 2``."""
    dx = D.apply(x)
    s2 = float(dx @ dx)
    if not s2 > 0:
        raise DegenerateConditionalError("Dx = 0 (constant image): the gamma_x conditional is improper")
    return shape_offset + (dx.size - 1) / 2.0, 2.0 / s2


def sample_gamma_n(stream: RandomStream, y, x, H: LinearOperator, shape_offset: float = 1.0) -> float:
    return stream.gamma(*gamma_n_conditional(y, x, H, shape_offset))


def sample_gamma_x(stream: RandomStream, x, D: LinearOperator, shape_offset: float = 1.0) -> float:
    return stream.gamma(*gamma_x_conditional(x, D, shape_offset))


@dataclass
class GibbsChain:
    """Hyperparameter traces plus running first/second moments of x.

    ``gamma_n[k]``, ``gamma_x[k]`` are drawn given the image of iteration
    ``k``.  Moments cover iterations ``burn_in`` onward.
    """

    gamma_n: np.ndarray
    gamma_x: np.ndarray
    cg_iterations: np.ndarray
    x_sum: np.ndarray
    x_sq_sum: np.ndarray
    count: int
    burn_in: int
    shape: tuple[int, int]
    seed: int
    config_hash: str
    x_last: np.ndarray
    thinned_x: list = field(default_factory=list)
    aborted: bool = False

    @property
    def n_iter(self) -> int:
        return self.gamma_n.size


class GibbsAborted(RuntimeError):
    """A solver failure stopped the chain; ``chain`` holds the completed prefix."""

    def __init__(self, message, chain: GibbsChain, cause: Exception):
        super().__init__(message)
        self.chain = chain
        self.cause = cause


def _exact_step(model, stream, cfg, x0):
    return exact_sample_dense(model, stream), None


def gibbs_run(
    cfg: SRConfig,
    y,
    stream: RandomStream,
    sampler: str = "po",
    gamma_init: tuple[float, float] = (1.0, 1.0),
    progress=None,
) -> GibbsChain:
    """Run one Gibbs chain.

    Each sweep draws ``x`` from its Gaussian conditional given the current
    ``(gamma_n, gamma_x)``, then both precisions from their Gamma
    conditionals given the new ``x``.  The chain starts from
    ``gamma_init`` and ``x = 0``; since ``x = 0`` makes both Gamma
    conditionals improper, the first sweep begins with the image step.

    Args:
        sampler: ``"po"`` (CG-based Perturbation-Optimization) or
            ``"exact"`` (dense Cholesky, desk scale only).
        progress: optional callable ``(k, gamma_n, gamma_x)`` per sweep.

    Raises:
        GibbsAborted: if the image step fails; the prefix is attached.
    """
    if sampler not in ("po", "exact"):
        raise ValueError(f"unknown sampler {sampler!r}")
    y = _flat(y, cfg.n_data)
    H = build_forward(cfg)
    D = build_prior(cfg)
    g_stream = stream.substream(GAMMA_STREAM)
    x_stream = stream.substream(IMAGE_STREAM)
    n_iter, burn_in = cfg.n_iter, cfg.burn_in

    gamma_n = np.empty(n_iter)
    gamma_x = np.empty(n_iter)
    cg_iters = np.zeros(n_iter, dtype=int)
    x_sum = np.zeros(cfg.n_pixels)
    x_sq_sum = np.zeros(cfg.n_pixels)
    thinned = []
    x = np.zeros(cfg.n_pixels)
    gn, gx = (float(g) for g in gamma_init)
    count = 0

    def _chain(k, aborted=False):
        return GibbsChain(
            gamma_n=gamma_n[:k].copy(),
            gamma_x=gamma_x[:k].copy(),
            cg_iterations=cg_iters[:k].copy(),
            x_sum=x_sum.copy(),
            x_sq_sum=x_sq_sum.copy(),
            count=count,
            burn_in=burn_in,
            shape=cfg.hi_shape,
            seed=stream.seed,
            config_hash=cfg.config_hash(),
            x_last=x.copy(),
            thinned_x=list(thinned),
            aborted=aborted,
        )

    for k in range(n_iter):
        model = posterior_factor_model(H, y, rn_diag=1.0 / gn, prior_op=D, gamma_x=gx)
        try:
            if sampler == "po":
                x0 = x if cfg.warm_start else None
                x, report = po_sample(model, x_stream, cfg.solver, x0=x0)
                if not report.converged:
                    raise SolverError(
                        f"CG did not reach tolerance in {report.iterations} iterations "
                        f"(residual {report.final_residual_norm:.3e} > {report.threshold:.3e})",
                        iterations=report.iterations,
                    )
                cg_iters[k] = report.iterations
            else:
                x = exact_sample_dense(model, x_stream)
        except (SolverError, np.linalg.LinAlgError) as err:
            raise GibbsAborted(f"image step failed at sweep {k}: {err}", _chain(k, aborted=True), err) from err
        gn = sample_gamma_n(g_stream, y, x, H, cfg.gamma_n_shape_offset)
        gx = sample_gamma_x(g_stream, x, D, cfg.gamma_x_shape_offset)
        gamma_n[k], gamma_x[k] = gn, gx
        if k >= burn_in:
            x_sum += x
            x_sq_sum += x * x
            count += 1
            if cfg.thin and (k - burn_in) % cfg.thin == 0:
                thinned.append(ImageGrid(cfg.hi_shape[0], cfg.hi_shape[1], x.copy()))
        if progress is not None:
            progress(k, gn, gx)
    return _chain(n_iter)


@dataclass
class ChainStats:
    mean: np.ndarray
    std: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    ci_level: float
    z: float
    gamma_n_mean: float
    gamma_x_mean: float
    gamma_n_std: float
    gamma_x_std: float
    gamma_n_hist: tuple[np.ndarray, np.ndarray]
    gamma_x_hist: tuple[np.ndarray, np.ndarray]
    n_samples: int

    def coverage(self, truth) -> float:
        """Fraction of truth pixels inside ``[lower, upper]``."""
        t = _flat(truth, self.mean.size).reshape(self.mean.shape)
        return float(np.mean((t >= self.lower) & (t <= self.upper)))


def chain_stats(chains: GibbsChain | Sequence[GibbsChain], ci_level: float = 0.99, bins: int = 30) -> ChainStats:
    """Posterior summaries from one chain or several merged chains.

    The interval is the Gaussian approximation ``mean +/- z * std``.
    """
    if isinstance(chains, GibbsChain):
        chains = [chains]
    if not 0 < ci_level < 1:
        raise ValueError("ci_level must lie in (0, 1)")
    count = sum(c.count for c in chains)
    if count < 2:
        raise ValueError(f"need at least 2 post-burn-in iterates, have {count}")
    shape = chains[0].shape
    x_sum = sum(c.x_sum for c in chains)
    x_sq_sum = sum(c.x_sq_sum for c in chains)
    mean = x_sum / count
    var = np.maximum(x_sq_sum / count - mean * mean, 0.0)
    std = np.sqrt(var)
    z = NormalDist().inv_cdf(0.5 + ci_level / 2)
    gn = np.concatenate([c.gamma_n[c.burn_in :] for c in chains])
    gx = np.concatenate([c.gamma_x[c.burn_in :] for c in chains])
    return ChainStats(
        mean=mean.reshape(shape),
        std=std.reshape(shape),
        lower=(mean - z * std).reshape(shape),
        upper=(mean + z * std).reshape(shape),
        ci_level=ci_level,
        z=z,
        gamma_n_mean=float(gn.mean()),
        gamma_x_mean=float(gx.mean()),
        gamma_n_std=float(gn.std()),
        gamma_x_std=float(gx.std()),
        gamma_n_hist=np.histogram(gn, bins=bins),
        gamma_x_hist=np.histogram(gx, bins=bins),
        n_samples=count,
    )


def zero_insertion_baseline(cfg: SRConfig, y) -> np.ndarray:
    """Deblur-free reconstruction: average of the zero-inserted frames.

    Pixels not covered by any frame stay at zero.
    """
    decims = Stack([Decimate2D(cfg.hi_shape, cfg.factor, p) for p in cfg.frame_phases])
    y = _flat(y, cfg.n_data)
    hits = decims.apply_adjoint(np.ones(cfg.n_data))
    up = decims.apply_adjoint(y)
    out = np.divide(up, hits, out=np.zeros_like(up), where=hits > 0)
    return out.reshape(cfg.hi_shape)


def synthetic_image(shape=(64, 64), amplitude: float = 100.0) -> np.ndarray:
    """Smooth deterministic test scene: a few Gaussian blobs and a soft ring."""
    rows, cols = shape
    r = np.arange(rows)[:, None] / rows
    c = np.arange(cols)[None, :] / cols
    img = np.zeros(shape)
    for (cr, cc, w, a) in [(0.3, 0.3, 0.08, 1.0), (0.7, 0.35, 0.12, 0.6), (0.45, 0.75, 0.06, 0.8)]:
        img += a * np.exp(-((r - cr) ** 2 + (c - cc) ** 2) / (2 * w * w))
    rad = np.sqrt((r - 0.65) ** 2 + (c - 0.7) ** 2)
    img += 0.5 * np.exp(-((rad - 0.18) ** 2) / (2 * 0.03**2))
    return amplitude * img
