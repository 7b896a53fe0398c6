"""Matrix-free linear operators.

Every operator maps real vectors of length ``in_dim`` to vectors of length
``out_dim``.  ``apply`` and ``apply_adjoint`` also accept a 2-D array of
shape ``(dim, k)`` and act column by column, which is how ``to_dense``
extracts all columns in one pass.

Image-shaped operators use row-major flattening and periodic boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.fft

from .errors import DensificationError, DimensionError

DENSE_CAP = 2**20

LAPLACIAN_KERNEL = np.array([[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]])


@dataclass(frozen=True)
class ImageGrid:
    """A 2-D real field stored row-major."""

    rows: int
    cols: int
    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=float).reshape(-1)
        if self.rows < 1 or self.cols < 1:
            raise DimensionError(f"image shape must be positive, got {self.rows}x{self.cols}")
        if values.size != self.rows * self.cols:
            raise DimensionError(
                f"image {self.rows}x{self.cols} needs {self.rows * self.cols} values, got {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("image values must be finite")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_array(cls, array) -> ImageGrid:
        array = np.asarray(array, dtype=float)
        if array.ndim != 2:
            raise DimensionError(f"expected a 2-D array, got ndim={array.ndim}")
        return cls(array.shape[0], array.shape[1], array.reshape(-1))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.rows, self.cols)


def _as_shape(shape) -> tuple[int, int]:
    rows, cols = (int(s) for s in shape)
    if rows < 1 or cols < 1:
        raise DimensionError(f"shape must be positive, got {shape}")
    return rows, cols


class LinearOperator:
    """Base class.  Subclasses implement ``_matvec`` and ``_rmatvec`` on
    2-D arrays of shape ``(dim, k)``."""

    kind = "abstract"

    def __init__(self, out_dim: int, in_dim: int):
        if in_dim < 1 or out_dim < 1:
            raise DimensionError(f"operator dimensions must be positive, got {out_dim}x{in_dim}")
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.out_dim, self.in_dim)

    def _matvec(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _rmatvec(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply(self, x) -> np.ndarray:
        return self._dispatch(x, self.in_dim, self._matvec)

    def apply_adjoint(self, y) -> np.ndarray:
        return self._dispatch(y, self.out_dim, self._rmatvec)

    def _dispatch(self, v, dim, fn):
        v = np.asarray(v, dtype=float)
        if v.ndim not in (1, 2) or v.shape[0] != dim:
            raise DimensionError(f"{self.kind}: expected leading dimension {dim}, got shape {v.shape}")
        if v.ndim == 1:
            return fn(v[:, None])[:, 0]
        return fn(v)

    @property
    def T(self) -> LinearOperator:
        return Adjoint(self)

    def __matmul__(self, other):
        if isinstance(other, LinearOperator):
            return Composition(self, other)
        return self.apply(other)

    def __add__(self, other):
        if not isinstance(other, LinearOperator):
            return NotImplemented
        return Sum([self, other])

    def __repr__(self):
        return f"<{type(self).__name__} {self.out_dim}x{self.in_dim}>"


class DenseOperator(LinearOperator):
    kind = "dense"

    def __init__(self, matrix):
        matrix = np.array(matrix, dtype=float)
        if matrix.ndim != 2:
            raise DimensionError("dense operator needs a 2-D matrix")
        super().__init__(*matrix.shape)
        matrix.setflags(write=False)
        self.matrix = matrix

    def _matvec(self, x):
        return self.matrix @ x

    def _rmatvec(self, y):
        return self.matrix.T @ y


class Identity(LinearOperator):
    kind = "identity"

    def __init__(self, n: int):
        super().__init__(n, n)

    def _matvec(self, x):
        return x.copy()

    _rmatvec = _matvec


class ScaledIdentity(LinearOperator):
    kind = "scaled_identity"

    def __init__(self, n: int, alpha: float):
        super().__init__(n, n)
        self.alpha = float(alpha)

    def _matvec(self, x):
        return self.alpha * x

    _rmatvec = _matvec


class Diagonal(LinearOperator):
    kind = "diagonal"

    def __init__(self, diag):
        diag = np.array(diag, dtype=float).reshape(-1)
        super().__init__(diag.size, diag.size)
        diag.setflags(write=False)
        self.diag = diag

    def _matvec(self, x):
        return self.diag[:, None] * x

    _rmatvec = _matvec


def _embed_kernel(kernel: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Place a small kernel on a periodic grid with its center at (0, 0)."""
    kr, kc = kernel.shape
    rows, cols = shape
    if kr > rows or kc > cols:
        raise DimensionError(f"kernel {kernel.shape} larger than grid {shape}")
    padded = np.zeros(shape)
    padded[:kr, :kc] = kernel
    return np.roll(padded, (-(kr // 2), -(kc // 2)), axis=(0, 1))


def kernel_spectrum(kernel, shape) -> np.ndarray:
    """Full 2-D DFT of the periodically embedded kernel (complex, ``shape``)."""
    kernel = kernel.as_array() if isinstance(kernel, ImageGrid) else np.asarray(kernel, float)
    return np.fft.fft2(_embed_kernel(kernel, _as_shape(shape)))


class CirculantConv2D(LinearOperator):
    """Periodic 2-D convolution with a small kernel, applied by FFT.

    The kernel's center element ``(kr // 2, kc // 2)`` is the origin, so an
    odd-sized kernel is applied without shift.
    """

    kind = "circulant_conv2d"

    def __init__(self, kernel, shape):
        if isinstance(kernel, ImageGrid):
            kernel = kernel.as_array()
        kernel = np.array(kernel, dtype=float)
        if kernel.ndim != 2:
            raise DimensionError("convolution kernel must be 2-D")
        self.grid = _as_shape(shape)
        super().__init__(self.grid[0] * self.grid[1], self.grid[0] * self.grid[1])
        kernel.setflags(write=False)
        self.kernel = kernel
        self.spectrum = scipy.fft.rfft2(_embed_kernel(kernel, self.grid))
        self.spectrum.setflags(write=False)

    def _filter(self, x, spectrum):
        rows, cols = self.grid
        k = x.shape[1]
        img = x.reshape(rows, cols, k)
        spec = scipy.fft.rfft2(img, axes=(0, 1))
        spec *= spectrum[:, :, None]
        out = scipy.fft.irfft2(spec, s=(rows, cols), axes=(0, 1))
        return out.reshape(rows * cols, k)

    def _matvec(self, x):
        return self._filter(x, self.spectrum)

    def _rmatvec(self, y):
        return self._filter(y, self.spectrum.conj())


class Decimate2D(LinearOperator):
    """Keep the pixels whose row and column are congruent to ``phase``
    modulo ``factor``.  The adjoint is zero-insertion upsampling."""

    kind = "decimate2d"

    def __init__(self, shape, factor: int, phase=(0, 0)):
        self.grid = _as_shape(shape)
        self.factor = int(factor)
        self.phase = tuple(int(p) for p in phase)
        rows, cols = self.grid
        if self.factor < 1:
            raise DimensionError("decimation factor must be a positive integer")
        if rows % self.factor or cols % self.factor:
            raise DimensionError(f"grid {self.grid} not divisible by factor {self.factor}")
        if len(self.phase) != 2 or not all(0 <= p < self.factor for p in self.phase):
            raise DimensionError(f"phase {phase} must lie in [0, {self.factor})^2")
        self.low_shape = (rows // self.factor, cols // self.factor)
        super().__init__(self.low_shape[0] * self.low_shape[1], rows * cols)

    def _matvec(self, x):
        rows, cols = self.grid
        f, (pr, pc) = self.factor, self.phase
        k = x.shape[1]
        return x.reshape(rows, cols, k)[pr::f, pc::f, :].reshape(self.out_dim, k)

    def _rmatvec(self, y):
        rows, cols = self.grid
        f, (pr, pc) = self.factor, self.phase
        k = y.shape[1]
        out = np.zeros((rows, cols, k))
        out[pr::f, pc::f, :] = y.reshape(self.low_shape[0], self.low_shape[1], k)
        return out.reshape(self.in_dim, k)


class Laplacian2D(LinearOperator):
    """Periodic 5-point Laplacian (4 at the center, -1 at the neighbours)."""

    kind = "laplacian2d"

    def __init__(self, shape):
        self.grid = _as_shape(shape)
        n = self.grid[0] * self.grid[1]
        super().__init__(n, n)

    def _matvec(self, x):
        rows, cols = self.grid
        k = x.shape[1]
        img = x.reshape(rows, cols, k)
        out = 4.0 * img
        # periodic neighbours: interior slices plus the wrapped edge
        out[1:] -= img[:-1]
        out[:1] -= img[-1:]
        out[:-1] -= img[1:]
        out[-1:] -= img[:1]
        out[:, 1:] -= img[:, :-1]
        out[:, :1] -= img[:, -1:]
        out[:, :-1] -= img[:, 1:]
        out[:, -1:] -= img[:, :1]
        return out.reshape(rows * cols, k)

    _rmatvec = _matvec


class Composition(LinearOperator):
    """``outer @ inner``: apply ``inner`` first."""

    kind = "composition"

    def __init__(self, outer: LinearOperator, inner: LinearOperator):
        if inner.out_dim != outer.in_dim:
            raise DimensionError(
                f"cannot compose {outer!r} after {inner!r}: {inner.out_dim} != {outer.in_dim}"
            )
        super().__init__(outer.out_dim, inner.in_dim)
        self.outer = outer
        self.inner = inner

    def _matvec(self, x):
        return self.outer._matvec(self.inner._matvec(x))

    def _rmatvec(self, y):
        return self.inner._rmatvec(self.outer._rmatvec(y))


class Sum(LinearOperator):
    kind = "sum"

    def __init__(self, terms: Sequence[LinearOperator]):
        terms = list(terms)
        if not terms:
            raise DimensionError("sum of zero operators")
        shape = terms[0].shape
        for t in terms[1:]:
            if t.shape != shape:
                raise DimensionError(f"sum terms disagree in shape: {shape} vs {t.shape}")
        super().__init__(*shape)
        self.terms = tuple(terms)

    def _matvec(self, x):
        out = self.terms[0]._matvec(x)
        for t in self.terms[1:]:
            out = out + t._matvec(x)
        return out

    def _rmatvec(self, y):
        out = self.terms[0]._rmatvec(y)
        for t in self.terms[1:]:
            out = out + t._rmatvec(y)
        return out


class Stack(LinearOperator):
    """Vertical concatenation ``[A_1; A_2; ...]`` of operators sharing in_dim."""

    kind = "stack"

    def __init__(self, blocks: Sequence[LinearOperator]):
        blocks = list(blocks)
        if not blocks:
            raise DimensionError("stack of zero operators")
        in_dim = blocks[0].in_dim
        for b in blocks[1:]:
            if b.in_dim != in_dim:
                raise DimensionError(f"stack blocks disagree in in_dim: {in_dim} vs {b.in_dim}")
        super().__init__(sum(b.out_dim for b in blocks), in_dim)
        self.blocks = tuple(blocks)
        self.offsets = np.cumsum([0] + [b.out_dim for b in blocks])

    def _matvec(self, x):
        return np.concatenate([b._matvec(x) for b in self.blocks], axis=0)

    def _rmatvec(self, y):
        out = np.zeros((self.in_dim, y.shape[1]))
        for b, lo, hi in zip(self.blocks, self.offsets[:-1], self.offsets[1:]):
            out += b._rmatvec(y[lo:hi])
        return out


class Adjoint(LinearOperator):
    kind = "adjoint"

    def __init__(self, op: LinearOperator):
        super().__init__(op.in_dim, op.out_dim)
        self.op = op

    def _matvec(self, x):
        return self.op._rmatvec(x)

    def _rmatvec(self, y):
        return self.op._matvec(y)

    @property
    def T(self):
        return self.op


def apply(op: LinearOperator, x) -> np.ndarray:
    return op.apply(x)


def apply_adjoint(op: LinearOperator, y) -> np.ndarray:
    return op.apply_adjoint(y)


def to_dense(op: LinearOperator, cap: int = DENSE_CAP) -> np.ndarray:
    """Materialize ``op`` as a matrix by applying it to the identity.

    Raises:
        DensificationError: if ``out_dim * in_dim`` exceeds ``cap``.
    """
    entries = op.out_dim * op.in_dim
    if entries > cap:
        raise DensificationError(
            f"{op!r} has {op.out_dim}x{op.in_dim} = {entries} entries, above the cap of {cap}"
        )
    if isinstance(op, DenseOperator):
        return op.matrix.copy()
    return op.apply(np.eye(op.in_dim))


def gram_operator(factors) -> LinearOperator:
    """Precision operator ``x -> sum_k M_k^t R_k^{-1} M_k x``.

    ``factors`` is a sequence of objects with ``M`` (a LinearOperator) and
    ``r_diag`` (positive diagonal of the covariance) attributes.
    """
    factors = list(factors)
    if not factors:
        raise DimensionError("gram_operator needs at least one factor")
    n = factors[0].M.in_dim
    terms = []
    for f in factors:
        if f.M.in_dim != n:
            raise DimensionError(f"factor in_dim {f.M.in_dim} differs from {n}")
        r = np.broadcast_to(np.asarray(f.r_diag, dtype=float), (f.M.out_dim,))
        if np.any(r <= 0):
            raise ValueError("covariance diagonals must be strictly positive")
        if np.all(r == r[0]):
            weight = ScaledIdentity(f.M.out_dim, 1.0 / r[0])
        else:
            weight = Diagonal(1.0 / r)
        terms.append(Composition(f.M.T, Composition(weight, f.M)))
    return terms[0] if len(terms) == 1 else Sum(terms)
