"""Dense N-order tensors and the multilinear operations built on them.

Everything here is a pure function of its inputs.  Tensors are stored
row-major (last index fastest) in double precision unless single precision
is requested at construction.

Convolution follows the cross-correlation convention: output index ``j'``
reads input index ``j = s*j' + k - p`` for kernel tap ``k``, with no kernel
flip.  Out-of-range input indices are zero padding.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DenseTensor",
    "DummyTensorSpec",
    "ShapeMismatchError",
    "InvalidAxisError",
    "NonFiniteError",
    "as_tensor",
    "contract",
    "build_dummy_tensor",
    "conv1d_via_dummy",
    "conv2d_forward",
    "conv_output_len",
    "cp_reconstruct",
    "tr_reconstruct",
]

_DTYPES = {"float64": np.float64, "float32": np.float32}


class ShapeMismatchError(ValueError):
    pass


class InvalidAxisError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class DenseTensor:
    """Immutable dense tensor with an explicit shape.

    ``data`` is the flat row-major view; ``array`` the shaped read-only view.
    Order-0 tensors only arise as full contractions and hold one number.
    """

    __slots__ = ("_array",)

    def __init__(self, data, shape: Sequence[int] | None = None, dtype: str = "float64"):
        if dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {dtype!r}")
        arr = np.array(data, dtype=_DTYPES[dtype], copy=True)
        if shape is not None:
            shape = tuple(int(n) for n in shape)
            if any(n < 1 for n in shape):
                raise ValueError(f"extents must be positive, got {shape}")
            if arr.size != prod(shape):
                raise ShapeMismatchError(
                    f"data length {arr.size} does not match shape {shape} (product {prod(shape)})"
                )
            arr = arr.reshape(shape)
        elif arr.ndim >= 1 and any(n < 1 for n in arr.shape):
            raise ValueError(f"extents must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor entries must be finite")
        arr.setflags(write=False)
        self._array = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "DenseTensor":
        # Trusted internal constructor: validates finiteness, skips the copy.
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("operation produced non-finite entries")
        t = cls.__new__(cls)
        arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
        arr.setflags(write=False)
        t._array = arr
        return t

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype: str = "float64") -> "DenseTensor":
        return cls(np.zeros(tuple(shape)), dtype=dtype)

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def order(self) -> int:
        return self._array.ndim

    @property
    def dtype(self) -> np.dtype:
        return self._array.dtype

    @property
    def array(self) -> np.ndarray:
        return self._array

    @property
    def data(self) -> np.ndarray:
        return self._array.reshape(-1)

    def numpy(self) -> np.ndarray:
        """Writable copy of the shaped array."""
        return np.array(self._array)

    def reshape(self, shape: Sequence[int]) -> "DenseTensor":
        return DenseTensor(self._array, shape=shape, dtype=self.dtype.name)

    def __repr__(self) -> str:
        return f"DenseTensor(shape={self.shape}, dtype={self.dtype.name})"


def as_tensor(x) -> DenseTensor:
    if isinstance(x, DenseTensor):
        return x
    return DenseTensor(x)


def _array(x) -> np.ndarray:
    return x.array if isinstance(x, DenseTensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# contraction


def contract_arrays(a: np.ndarray, b: np.ndarray, pairs: Iterable[tuple[int, int]]) -> np.ndarray:
    """Array-level contraction; see :func:`contract`."""
    pairs = [(int(i), int(j)) for i, j in pairs]
    axes_a = [i for i, _ in pairs]
    axes_b = [j for _, j in pairs]
    for i, j in pairs:
        if not 0 <= i < a.ndim:
            raise InvalidAxisError(f"axis {i} of a is out of range for order {a.ndim}")
        if not 0 <= j < b.ndim:
            raise InvalidAxisError(f"axis {j} of b is out of range for order {b.ndim}")
    if len(set(axes_a)) != len(axes_a) or len(set(axes_b)) != len(axes_b):
        raise InvalidAxisError(f"an axis appears twice in pairs {pairs}")
    for i, j in pairs:
        if a.shape[i] != b.shape[j]:
            raise ShapeMismatchError(
                f"pair ({i}, {j}): extent {a.shape[i]} of a != extent {b.shape[j]} of b"
            )

    free_a = [i for i in range(a.ndim) if i not in axes_a]
    free_b = [j for j in range(b.ndim) if j not in axes_b]
    shared = prod(a.shape[i] for i in axes_a)
    out_shape = tuple(a.shape[i] for i in free_a) + tuple(b.shape[j] for j in free_b)

    left = a.transpose(free_a + axes_a).reshape(-1, shared)
    right = b.transpose(axes_b + free_b).reshape(shared, -1)
    return (left @ right).reshape(out_shape)


def contract(a, b, pairs: Iterable[tuple[int, int]]) -> DenseTensor:
    """Sum two tensors over paired axes.

    Parameters
    ----------
    a, b : DenseTensor or array-like
    pairs : iterable of (axis of a, axis of b)
        Paired extents must be equal.  An empty list gives the outer product.

    Returns
    -------
    DenseTensor
        Order ``a.order + b.order - 2*len(pairs)``.  Axes are the free axes
        of ``a`` in order followed by the free axes of ``b``.
    """
    return DenseTensor._wrap(contract_arrays(_array(a), _array(b), pairs))


# ---------------------------------------------------------------------------
# dummy tensor and convolution


def conv_output_len(input_len: int, kernel_len: int, stride: int = 1, padding: int = 0) -> int:
    return (input_len + 2 * padding - kernel_len) // stride + 1


@dataclass(frozen=True)
class DummyTensorSpec:
    """Geometry of the binary tensor ``P[j, j', k] = [j == s*j' + k - p]``."""

    input_len: int
    output_len: int
    kernel_len: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("input_len", "output_len", "kernel_len", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise ValueError(f"padding must be nonnegative, got {self.padding}")
        s, p, a, b = self.stride, self.padding, self.input_len, self.kernel_len
        for jp in range(self.output_len):
            # window [s*jp - p, s*jp - p + b - 1] must overlap [0, a)
            lo = s * jp - p
            if lo > a - 1 or lo + b - 1 < 0:
                raise ValueError(
                    f"output index {jp} reads only padding for geometry {self}"
                )

    @classmethod
    def for_geometry(cls, input_len: int, kernel_len: int, stride: int = 1, padding: int = 0):
        out = conv_output_len(input_len, kernel_len, stride, padding)
        if out < 1:
            raise ValueError(
                f"kernel {kernel_len} does not fit input {input_len} with padding {padding}"
            )
        return cls(input_len, out, kernel_len, stride, padding)


def dummy_array(spec: DummyTensorSpec, dtype=np.float64) -> np.ndarray:
    P = np.zeros((spec.input_len, spec.output_len, spec.kernel_len), dtype=dtype)
    jp, k = np.meshgrid(np.arange(spec.output_len), np.arange(spec.kernel_len), indexing="ij")
    j = spec.stride * jp + k - spec.padding
    ok = (j >= 0) & (j < spec.input_len)
    P[j[ok], jp[ok], k[ok]] = 1.0
    return P


def build_dummy_tensor(spec: DummyTensorSpec) -> DenseTensor:
    """Binary 3-order tensor of shape ``input_len x output_len x kernel_len``."""
    return DenseTensor._wrap(dummy_array(spec))


def conv1d_via_dummy(a, b, spec: DummyTensorSpec) -> DenseTensor:
    """1-D cross-correlation as two contractions against the dummy tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != (spec.input_len,):
        raise ShapeMismatchError(f"input has shape {a.shape}, spec expects ({spec.input_len},)")
    if b.shape != (spec.kernel_len,):
        raise ShapeMismatchError(f"kernel has shape {b.shape}, spec expects ({spec.kernel_len},)")
    P = build_dummy_tensor(spec)
    t = contract(a, P, [(0, 0)])  # (alpha', beta)
    return contract(t, b, [(1, 0)])


def conv2d_arrays(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Array-level 2-D cross-correlation; see :func:`conv2d_forward`."""
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeMismatchError(f"expected x: HxWxI and w: KxKxIxO, got {x.shape} and {w.shape}")
    H, W, I = x.shape
    Kh, Kw, Iw, _ = w.shape
    if Iw != I:
        raise ShapeMismatchError(f"input channels {I} != kernel input channels {Iw}")
    Ph = dummy_array(DummyTensorSpec.for_geometry(H, Kh, stride, padding), x.dtype)
    Pw = dummy_array(DummyTensorSpec.for_geometry(W, Kw, stride, padding), x.dtype)
    t = contract_arrays(x, Ph, [(0, 0)])  # W, I, H', Kh
    t = contract_arrays(t, Pw, [(0, 0)])  # I, H', Kh, W', Kw
    return contract_arrays(t, w, [(2, 0), (4, 1), (0, 2)])  # H', W', O


def conv2d_forward(x, w, stride: int = 1, padding: int = 0) -> DenseTensor:
    """2-D cross-correlation of an ``HxWxI`` input with a ``KxKxIxO`` kernel.

    One dummy tensor per spatial axis; the result is ``H'xW'xO`` with
    ``H' = (H + 2p - K)//s + 1``.
    """
    return DenseTensor._wrap(conv2d_arrays(_array(x), _array(w), stride, padding))


# ---------------------------------------------------------------------------
# CP and tensor-ring formats


def cp_reconstruct(factors: Sequence, lambdas) -> DenseTensor:
    """Sum of ``R`` weighted rank-one terms, ``X = sum_r lambda_r prod_n A_n[i_n, r]``."""
    mats = [_array(f) for f in factors]
    lam = _array(lambdas)
    if not mats:
        raise ValueError("need at least one factor")
    if any(m.ndim != 2 for m in mats):
        raise ShapeMismatchError("every CP factor must be a matrix")
    R = mats[0].shape[1]
    for n, m in enumerate(mats):
        if m.shape[1] != R:
            raise ShapeMismatchError(f"factor {n} has rank {m.shape[1]}, factor 0 has rank {R}")
    if lam.shape != (R,):
        raise ShapeMismatchError(f"lambdas have shape {lam.shape}, expected ({R},)")

    # Accumulate X with a trailing rank axis, then close it against lambdas.
    acc = mats[0] * lam
    for m in mats[1:]:
        acc = (acc[..., None, :] * m).reshape(acc.shape[:-1] + (m.shape[0], R))
    return DenseTensor._wrap(acc.sum(axis=-1))


def tr_reconstruct(cores: Sequence) -> DenseTensor:
    """Tensor ring: ``X[i1..iN] = Tr(G1[:, i1, :] @ ... @ GN[:, iN, :])``."""
    gs = [_array(g) for g in cores]
    if not gs:
        raise ValueError("need at least one core")
    if any(g.ndim != 3 for g in gs):
        raise ShapeMismatchError("every TR core must be 3-order")
    N = len(gs)
    for n in range(N):
        nxt = (n + 1) % N
        if gs[n].shape[2] != gs[nxt].shape[0]:
            raise ShapeMismatchError(
                f"bond mismatch: core {n} right rank {gs[n].shape[2]} != core {nxt} left rank {gs[nxt].shape[0]}"
            )

    # chain: (R1, I1*...*In, R_{n+1})
    chain = gs[0]
    for g in gs[1:]:
        chain = contract_arrays(chain, g, [(2, 0)])
        chain = chain.reshape(chain.shape[0], -1, chain.shape[-1])
    out = np.trace(chain, axis1=0, axis2=2)
    return DenseTensor._wrap(out.reshape(tuple(g.shape[1] for g in gs)))


def im2col(X: np.ndarray, kernel: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Patches of a batch ``N x H x W x I`` as ``N x H' x W' x K x K x I``.

    Same index rule as the dummy tensors, gathered directly; used where the
    batch is large and the dummy-tensor contraction would be slow.
    """
    if padding:
        X = np.pad(X, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(X, (kernel, kernel), axis=(1, 2))
    # win: N, H'', W'', I, K, K  (stride-1 windows)
    win = win[:, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
