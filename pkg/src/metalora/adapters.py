"""Delta-weight constructions for the six adapter variants.

Static adapters (``MatrixLoRA``, ``ConvLoRA``) own their whole delta.  Meta
adapters own fixed factors and are closed per call by a generated seed: a
vector ``c`` for the CP forms, an ``R x R`` matrix ``C`` for the tensor-ring
forms.  The CP diagonal core is the identity and is never materialized.

All adapters are immutable; training produces new instances through
:meth:`with_factors`.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .serialization import read_checkpoint, write_checkpoint
from .tensor_core import (
    DenseTensor,
    ShapeMismatchError,
    as_tensor,
    contract,
    contract_arrays,
    conv2d_forward,
)

__all__ = [
    "MatrixLoRA",
    "ConvLoRA",
    "MetaCPAdapter",
    "MetaTRAdapter",
    "ConvMetaCPAdapter",
    "ConvMetaTRAdapter",
    "ADAPTER_TYPES",
    "matrix_lora_delta",
    "conv_lora_delta",
    "conv_lora_apply_factored",
    "meta_cp_delta",
    "meta_tr_delta",
    "conv_meta_cp_delta",
    "conv_meta_tr_delta",
    "adapter_delta",
    "param_count",
    "init_adapter",
    "save_adapter",
    "load_adapter",
]


def _frozen(arr) -> np.ndarray:
    a = np.array(arr, dtype=np.float64)
    a.setflags(write=False)
    return a


class _Adapter:
    variant: str = ""
    factor_names: tuple[str, ...] = ("A", "B")
    is_meta: bool = False
    is_conv: bool = False

    def __post_init__(self):
        for name in self.factor_names:
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        self._check()

    def _check(self):
        pass

    def factors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.factor_names}

    def with_factors(self, **factors):
        return dataclasses.replace(self, **factors)

    @property
    def rank(self) -> int:
        return self.B.shape[0]

    @property
    def delta_shape(self) -> tuple[int, ...]:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class MatrixLoRA(_Adapter):
    A: np.ndarray  # I x R
    B: np.ndarray  # R x O
    scale: float = 1.0
    variant = "lora"

    def _check(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[0]:
            raise ShapeMismatchError(f"LoRA factors {self.A.shape} and {self.B.shape} do not chain")
        I, R = self.A.shape
        O = self.B.shape[1]
        if R > min(I, O):
            warnings.warn(f"LoRA rank {R} exceeds min(I, O) = {min(I, O)}", stacklevel=3)

    @property
    def delta_shape(self):
        return (self.A.shape[0], self.B.shape[1])


@dataclass(frozen=True, eq=False)
class ConvLoRA(_Adapter):
    A: np.ndarray  # K x K x I x R, the small filter bank
    B: np.ndarray  # R x O, channel recovery
    scale: float = 1.0
    variant = "conv_lora"
    is_conv = True

    def _check(self):
        if self.A.ndim != 4 or self.A.shape[0] != self.A.shape[1]:
            raise ShapeMismatchError(f"Conv-LoRA filters must be KxKxIxR, got {self.A.shape}")
        if self.B.ndim != 2 or self.B.shape[0] != self.A.shape[3]:
            raise ShapeMismatchError(f"channel recovery {self.B.shape} does not match rank {self.A.shape[3]}")

    @property
    def delta_shape(self):
        return self.A.shape[:3] + (self.B.shape[1],)


@dataclass(frozen=True, eq=False)
class MetaCPAdapter(_Adapter):
    A: np.ndarray  # I x R
    B: np.ndarray  # R x O
    scale: float = 1.0
    variant = "meta_cp"
    is_meta = True

    def _check(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[0]:
            raise ShapeMismatchError(f"CP factors {self.A.shape} and {self.B.shape} do not chain")

    @property
    def seed_shape(self):
        return (self.A.shape[1],)

    @property
    def delta_shape(self):
        return (self.A.shape[0], self.B.shape[1])


@dataclass(frozen=True, eq=False)
class MetaTRAdapter(_Adapter):
    A: np.ndarray  # R x I x R
    B: np.ndarray  # R x O x R
    scale: float = 1.0
    variant = "meta_tr"
    is_meta = True

    def _check(self):
        if self.A.ndim != 3 or self.B.ndim != 3:
            raise ShapeMismatchError("TR factors must be 3-order")
        R = self.A.shape[0]
        if not (self.A.shape[2] == R and self.B.shape[0] == R and self.B.shape[2] == R):
            raise ShapeMismatchError(
                f"TR factors must share one bond rank, got {self.A.shape} and {self.B.shape}"
            )

    @property
    def seed_shape(self):
        R = self.A.shape[0]
        return (R, R)

    @property
    def delta_shape(self):
        return (self.A.shape[1], self.B.shape[1])


@dataclass(frozen=True, eq=False)
class ConvMetaCPAdapter(ConvLoRA):
    variant = "conv_meta_cp"
    is_meta = True

    @property
    def seed_shape(self):
        return (self.A.shape[3],)


@dataclass(frozen=True, eq=False)
class ConvMetaTRAdapter(_Adapter):
    """Tensor-ring conv adapter with ``K*K*I`` folded into A's middle axis."""

    A: np.ndarray  # R x (K*K*I) x R
    B: np.ndarray  # R x O x R
    kernel_shape: tuple[int, int, int] = (1, 1, 1)  # (K, K, I)
    scale: float = 1.0
    variant = "conv_meta_tr"
    is_meta = True
    is_conv = True

    def _check(self):
        MetaTRAdapter._check(self)
        object.__setattr__(self, "kernel_shape", tuple(int(n) for n in self.kernel_shape))
        K1, K2, I = self.kernel_shape
        if K1 != K2:
            raise ShapeMismatchError(f"kernel must be square, got {self.kernel_shape}")
        if self.A.shape[1] != K1 * K2 * I:
            raise ShapeMismatchError(
                f"A middle extent {self.A.shape[1]} != K*K*I = {K1 * K2 * I}"
            )

    seed_shape = MetaTRAdapter.seed_shape

    @property
    def delta_shape(self):
        return self.kernel_shape + (self.B.shape[1],)


ADAPTER_TYPES = {
    cls.variant: cls
    for cls in (MatrixLoRA, ConvLoRA, MetaCPAdapter, MetaTRAdapter, ConvMetaCPAdapter, ConvMetaTRAdapter)
}


# ---------------------------------------------------------------------------
# deltas


def _check_seed(c, shape) -> DenseTensor:
    c = as_tensor(c)
    if c.shape != tuple(shape):
        raise ShapeMismatchError(f"seed has shape {c.shape}, adapter expects {tuple(shape)}")
    return c


def _scaled(t: DenseTensor, scale: float) -> DenseTensor:
    if scale == 1.0:
        return t
    return DenseTensor._wrap(scale * t.array)


def matrix_lora_delta(ad: MatrixLoRA) -> DenseTensor:
    return _scaled(contract(ad.A, ad.B, [(1, 0)]), ad.scale)


def conv_lora_delta(ad: ConvLoRA) -> DenseTensor:
    """``dW[k1,k2,i,o] = scale * sum_r A[k1,k2,i,r] B[r,o]``."""
    return _scaled(contract(ad.A, ad.B, [(3, 0)]), ad.scale)


def conv_lora_apply_factored(x, ad: ConvLoRA, stride: int = 1, padding: int = 0) -> DenseTensor:
    """Small rank-``R`` convolution followed by a 1x1 channel recovery.

    Never materializes the ``KxKxIxO`` delta.
    """
    y = conv2d_forward(x, ad.A, stride, padding)  # H' x W' x R
    return _scaled(contract(y, ad.B, [(2, 0)]), ad.scale)


def meta_cp_delta(ad: MetaCPAdapter, c) -> DenseTensor:
    """``dW = A diag(c) B``, i.e. ``sum_r A[:, r] B[r, :] c[r]``."""
    c = _check_seed(c, ad.seed_shape)
    weighted = DenseTensor._wrap(ad.A * c.array)
    return _scaled(contract(weighted, ad.B, [(1, 0)]), ad.scale)


def _tr_matrix_delta(A: np.ndarray, B: np.ndarray, C: np.ndarray) -> np.ndarray:
    # dW[i, o] = sum A[r0, i, r1] B[r1, o, r2] C[r2, r0] = Tr(A_i B_o C)
    t = contract_arrays(A, B, [(2, 0)])  # r0, i, o, r2
    return contract_arrays(t, C, [(3, 0), (0, 1)])


def meta_tr_delta(ad: MetaTRAdapter, C) -> DenseTensor:
    C = _check_seed(C, ad.seed_shape)
    return _scaled(DenseTensor._wrap(_tr_matrix_delta(ad.A, ad.B, C.array)), ad.scale)


def conv_meta_cp_delta(ad: ConvMetaCPAdapter, c) -> DenseTensor:
    c = _check_seed(c, ad.seed_shape)
    weighted = DenseTensor._wrap(ad.A * c.array)
    return _scaled(contract(weighted, ad.B, [(3, 0)]), ad.scale)


def conv_meta_tr_delta(ad: ConvMetaTRAdapter, C) -> DenseTensor:
    C = _check_seed(C, ad.seed_shape)
    flat = _tr_matrix_delta(ad.A, ad.B, C.array)  # (K*K*I) x O
    return _scaled(DenseTensor._wrap(flat.reshape(ad.delta_shape)), ad.scale)


_DELTA_FN = {
    "lora": "matrix_lora_delta",
    "conv_lora": "conv_lora_delta",
    "meta_cp": "meta_cp_delta",
    "meta_tr": "meta_tr_delta",
    "conv_meta_cp": "conv_meta_cp_delta",
    "conv_meta_tr": "conv_meta_tr_delta",
}


def adapter_delta(ad, seed=None) -> DenseTensor:
    """Dispatch to the delta construction matching ``ad.variant``."""
    # resolved at call time so the module-level functions stay patchable
    fn = globals()[_DELTA_FN[ad.variant]]
    if not ad.is_meta:
        return fn(ad)
    if seed is None:
        raise ValueError(f"{ad.variant} needs a generated seed")
    return fn(ad, seed)


def param_count(adapter) -> int:
    """Trainable scalars in the adapter's factors (mapping net excluded)."""
    return int(sum(np.size(f) for f in adapter.factors().values()))


# ---------------------------------------------------------------------------
# construction


def init_adapter(
    variant: str,
    delta_shape: tuple[int, ...],
    rank: int,
    rng: np.random.Generator,
    scale: float = 1.0,
    zero_last: bool = True,
):
    """Random first factor ~ N(0, 1/sqrt(fan_in)), last factor zero.

    ``delta_shape`` is ``(I, O)`` for matrix variants and ``(K, K, I, O)`` for
    conv variants.
    """
    if variant not in ADAPTER_TYPES:
        raise ValueError(f"unknown adapter variant {variant!r}; choose from {sorted(ADAPTER_TYPES)}")
    cls = ADAPTER_TYPES[variant]
    R = int(rank)
    if R < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if cls.is_conv and len(delta_shape) != 4:
        raise ShapeMismatchError(f"{variant} needs a KxKxIxO delta shape, got {delta_shape}")
    if not cls.is_conv and len(delta_shape) != 2:
        raise ShapeMismatchError(f"{variant} needs an IxO delta shape, got {delta_shape}")

    *in_dims, O = delta_shape
    fan_in = int(np.prod(in_dims))

    def last(shape):
        return np.zeros(shape) if zero_last else rng.normal(0.0, 1.0 / np.sqrt(R), shape)

    if variant in ("lora", "meta_cp"):
        A = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, R))
        return cls(A=A, B=last((R, O)), scale=scale)
    if variant in ("conv_lora", "conv_meta_cp"):
        A = rng.normal(0.0, 1.0 / np.sqrt(fan_in), tuple(in_dims) + (R,))
        return cls(A=A, B=last((R, O)), scale=scale)
    A = rng.normal(0.0, 1.0 / np.sqrt(fan_in * R), (R, fan_in, R))
    if variant == "meta_tr":
        return cls(A=A, B=last((R, O, R)), scale=scale)
    return cls(A=A, B=last((R, O, R)), kernel_shape=tuple(in_dims), scale=scale)


def adapter_manifest(ad) -> dict:
    m = {
        "variant": ad.variant,
        "shapes": {k: list(v.shape) for k, v in ad.factors().items()},
        "scale": float(ad.scale),
    }
    if ad.is_meta:
        key = "seed_dim" if len(ad.seed_shape) == 1 else "seed_shape"
        m[key] = ad.seed_shape[0] if key == "seed_dim" else list(ad.seed_shape)
    if isinstance(ad, ConvMetaTRAdapter):
        m["kernel_shape"] = list(ad.kernel_shape)
    return m


def save_adapter(ad, directory) -> Path:
    return write_checkpoint(directory, adapter_manifest(ad), ad.factors())


def adapter_from_manifest(manifest: dict, arrays: dict):
    cls = ADAPTER_TYPES[manifest["variant"]]
    kwargs = {name: arrays[name] for name in cls.factor_names}
    if "kernel_shape" in manifest:
        kwargs["kernel_shape"] = tuple(manifest["kernel_shape"])
    return cls(scale=manifest["scale"], **kwargs)


def load_adapter(directory):
    manifest, arrays = read_checkpoint(directory)
    return adapter_from_manifest(manifest, arrays)
