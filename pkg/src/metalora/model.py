"""Toy base network with pluggable adapters.

The base is ``conv -> activation -> global average pool -> linear head``.
The pooled vector is the embedding used for KNN evaluation.  One adapter
slot targets either the conv kernel or the head matrix; matrix adapters on
the conv target act on the kernel matricized as ``(K*K*I) x F``.

Two forward paths exist on purpose: :func:`tape_forward` (batched, records
gradients) and :func:`reference_forward` (per-sample, built only from the
pure ``tensor_core`` / ``adapters`` / ``meta_net`` functions).  Tests hold
them against each other.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import adapters as adapters_mod
from . import autodiff as ad
from .meta_net import (
    FeatureExtractor,
    MappingNet,
    activate,
    extract_features,
    extract_features_batch,
    mapping_forward,
)
from .tensor_core import ShapeMismatchError, conv2d_forward

TARGETS = ("conv", "head")
SEED_MODES = ("per_sample", "batch_mean")


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BaseModel:
    conv: np.ndarray  # K x K x I x F
    conv_bias: np.ndarray  # F
    head: np.ndarray  # F x C
    head_bias: np.ndarray  # C
    activation: str = "tanh"

    def __post_init__(self):
        for name in ("conv", "conv_bias", "head", "head_bias"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        K, K2, _, F = self.conv.shape
        if K != K2 or K % 2 == 0:
            raise ShapeMismatchError(f"conv kernel must be square with odd K, got {self.conv.shape}")
        if self.conv_bias.shape != (F,) or self.head.shape[0] != F:
            raise ShapeMismatchError("conv/head widths disagree")
        if self.head_bias.shape != (self.head.shape[1],):
            raise ShapeMismatchError("head bias width disagrees with head")

    @property
    def padding(self) -> int:
        return (self.conv.shape[0] - 1) // 2

    @property
    def num_classes(self) -> int:
        return self.head.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"conv": self.conv, "conv_bias": self.conv_bias, "head": self.head, "head_bias": self.head_bias}


def init_base(kernel_size: int, channels: int, features: int, num_classes: int,
              rng: np.random.Generator, activation: str = "tanh") -> BaseModel:
    fan = kernel_size * kernel_size * channels
    return BaseModel(
        conv=rng.normal(0.0, 1.0 / np.sqrt(fan), (kernel_size, kernel_size, channels, features)),
        conv_bias=np.zeros(features),
        head=rng.normal(0.0, 1.0 / np.sqrt(features), (features, num_classes)),
        head_bias=np.zeros(num_classes),
        activation=activation,
    )


@dataclass(frozen=True, eq=False)
class AdaptedModel:
    """Frozen base plus trainable adapters (and mapping net for Meta variants).

    ``adapters`` holds one adapter, or one per task when ``routed`` (the
    per-task Multi-LoRA arm, routed by oracle task id).  An empty tuple is
    the unadapted base.
    """

    base: BaseModel
    adapters: tuple = ()
    target: str = "conv"
    routed: bool = False
    mapping_net: MappingNet | None = None
    extractor: FeatureExtractor | None = None
    seed_mode: str = "per_sample"

    def __post_init__(self):
        object.__setattr__(self, "adapters", tuple(self.adapters))
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.seed_mode not in SEED_MODES:
            raise ValueError(f"seed_mode must be one of {SEED_MODES}, got {self.seed_mode!r}")
        if len(self.adapters) > 1 and not self.routed:
            raise ValueError("several adapters need task routing")
        want = self.target_shape
        for a in self.adapters:
            if a.is_conv and self.target != "conv":
                raise ShapeMismatchError(f"{a.variant} can only target the conv layer")
            got = a.delta_shape
            if int(np.prod(got)) != int(np.prod(want)) or got[-1] != want[-1]:
                raise ShapeMismatchError(f"{a.variant} delta {got} does not fit target {self.target} {want}")
            if a.is_meta and (self.mapping_net is None or self.extractor is None):
                raise ValueError(f"{a.variant} needs a mapping net and a feature extractor")
            if a.is_meta and self.routed:
                raise ValueError("routed adapters must be static")
        if self.is_meta:
            if tuple(self.mapping_net.seed_shape) != tuple(self.adapters[0].seed_shape):
                raise ShapeMismatchError(
                    f"mapping net emits {self.mapping_net.seed_shape}, adapter wants {self.adapters[0].seed_shape}"
                )
            if self.mapping_net.input_dim != self.extractor.output_dim:
                raise ShapeMismatchError("mapping net input width != extractor output width")

    @property
    def is_meta(self) -> bool:
        return bool(self.adapters) and self.adapters[0].is_meta

    @property
    def target_shape(self) -> tuple[int, ...]:
        return self.base.conv.shape if self.target == "conv" else self.base.head.shape

    def trainable_params(self) -> dict[str, np.ndarray]:
        out = {}
        for k, a in enumerate(self.adapters):
            for name, v in a.factors().items():
                out[f"adapter{k}.{name}"] = v
        if self.is_meta:
            for name, v in self.mapping_net.params().items():
                out[f"mapping.{name}"] = v
        return out

    def with_params(self, params: dict) -> "AdaptedModel":
        new_adapters = []
        for k, a in enumerate(self.adapters):
            fs = {n: params[f"adapter{k}.{n}"] for n in a.factor_names if f"adapter{k}.{n}" in params}
            new_adapters.append(a.with_factors(**fs) if fs else a)
        net = self.mapping_net
        if self.is_meta:
            mp = {n[len("mapping."):]: v for n, v in params.items() if n.startswith("mapping.")}
            net = net.with_params(mp)
        return dataclasses.replace(self, adapters=tuple(new_adapters), mapping_net=net)

    def adapter_param_count(self) -> int:
        return sum(adapters_mod.param_count(a) for a in self.adapters)


# ---------------------------------------------------------------------------
# tape path

_DELTA_EINSUM = {
    # static: shared delta; meta: one delta per seed row
    "lora": "ir,ro->io",
    "conv_lora": "abir,ro->abio",
    "meta_cp": "ir,ro,nr->nio",
    "meta_tr": "piq,qor,nrp->nio",
    "conv_meta_cp": "abir,ro,nr->nabio",
    "conv_meta_tr": "piq,qor,nrp->nio",
}


def _tape_delta(adapter, factors: dict, seed) -> ad.Var:
    spec = _DELTA_EINSUM[adapter.variant]
    ops = [factors["A"], factors["B"]] + ([seed] if adapter.is_meta else [])
    d = ad.einsum(spec, *ops)
    if adapter.variant == "conv_meta_tr":
        d = ad.reshape(d, (d.shape[0],) + adapter.delta_shape)
    return ad.scale(d, adapter.scale)


def _fit_target(delta: ad.Var, target_shape, batched: bool) -> ad.Var:
    lead = delta.shape[:1] if batched else ()
    if delta.shape[len(lead):] != tuple(target_shape):
        delta = ad.reshape(delta, lead + tuple(target_shape))
    return delta


def _tape_seed(tape, model: AdaptedModel, X: np.ndarray, leaves: dict) -> ad.Var:
    feats = extract_features_batch(X, model.extractor)
    h = tape.constant(feats)
    for k, layer in enumerate(model.mapping_net.layers):
        W = leaves.get(f"mapping.W{k}") or tape.constant(layer.weight)
        b = leaves.get(f"mapping.b{k}") or tape.constant(layer.bias)
        h = ad.activate(ad.add(ad.einsum("ni,oi->no", h, W), b), layer.activation)
    seed = ad.reshape(h, (len(X),) + tuple(model.mapping_net.seed_shape))
    if model.seed_mode == "batch_mean":
        seed = ad.add(ad.mul(seed, 0.0), ad.mean(seed, (0,)))
    return seed


def tape_forward(tape: ad.Tape, model: AdaptedModel, X: np.ndarray, task_ids=None,
                 leaves: dict | None = None) -> tuple[ad.Var, ad.Var]:
    """Record the adapted forward pass for a batch ``X`` (``N x H x W x I``).

    ``leaves`` maps trainable parameter names to tape vars; parameters not
    in it enter as constants.  Returns ``(logits, embedding)`` vars.
    """
    X = np.asarray(X, dtype=np.float64)
    leaves = leaves or {}
    base = model.base
    N = len(X)

    delta = None
    batched = False
    if model.adapters:
        def factors(k, a):
            return {n: leaves.get(f"adapter{k}.{n}") or tape.constant(v) for n, v in a.factors().items()}

        if model.is_meta:
            seed = _tape_seed(tape, model, X, leaves)
            delta = _fit_target(_tape_delta(model.adapters[0], factors(0, model.adapters[0]), seed),
                                model.target_shape, batched=True)
            batched = True
        elif model.routed:
            if task_ids is None:
                raise ValueError("routed adapters need task ids")
            task_ids = np.asarray(task_ids, dtype=np.intp)
            if task_ids.min() < 0 or task_ids.max() >= len(model.adapters):
                raise ValueError(f"task ids must lie in [0, {len(model.adapters)})")
            deltas = [
                _fit_target(_tape_delta(a, factors(k, a), None), model.target_shape, batched=False)
                for k, a in enumerate(model.adapters)
            ]
            stacked = stack(deltas)
            delta = ad.take(stacked, task_ids, axis=0)
            batched = True
        else:
            a = model.adapters[0]
            delta = _fit_target(_tape_delta(a, factors(0, a), None), model.target_shape, batched=False)

    conv_w = tape.constant(base.conv)
    head_w = tape.constant(base.head)
    if delta is not None and model.target == "conv":
        conv_w = ad.add(conv_w, delta)
    if delta is not None and model.target == "head":
        head_w = ad.add(head_w, delta)

    z = ad.conv2d(tape.constant(X), conv_w, 1, base.padding)
    z = ad.activate(ad.add(z, base.conv_bias), base.activation)
    emb = ad.mean(z, (1, 2))
    if head_w.value.ndim == 3:
        logits = ad.einsum("nf,nfc->nc", emb, head_w)
    else:
        logits = ad.einsum("nf,fc->nc", emb, head_w)
    logits = ad.add(logits, base.head_bias)
    assert logits.shape == (N, base.num_classes)
    return logits, emb


def stack(vars_: Sequence[ad.Var]) -> ad.Var:
    """Stack same-shape vars along a new leading axis."""
    tape = vars_[0].tape
    value = np.stack([v.value for v in vars_])
    return tape.push(value, "stack", tuple(vars_), lambda g: tuple(g[k] for k in range(len(vars_))))


def forward_adapted(model: AdaptedModel, x, task_ids=None) -> tuple[np.ndarray, np.ndarray]:
    """Logits and pooled embedding for one image or a batch of images."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    X = x[None] if single else x
    if single and task_ids is not None:
        task_ids = np.atleast_1d(task_ids)
    tape = ad.Tape()
    logits, emb = tape_forward(tape, model, X, task_ids)
    if single:
        return logits.value[0], emb.value[0]
    return logits.value, emb.value


def batched_forward(model: AdaptedModel, X, task_ids=None, batch_size: int = 256):
    logits, embs = [], []
    for start in range(0, len(X), batch_size):
        sl = slice(start, start + batch_size)
        tids = None if task_ids is None else np.asarray(task_ids)[sl]
        lo, em = forward_adapted(model, X[sl], tids)
        logits.append(lo)
        embs.append(em)
    return np.concatenate(logits), np.concatenate(embs)


# ---------------------------------------------------------------------------
# straight-line reference


def _effective_weight(model: AdaptedModel, x: np.ndarray, task_id, seed=None) -> np.ndarray:
    base = model.base
    W = base.conv if model.target == "conv" else base.head
    if not model.adapters:
        return W
    if model.is_meta:
        if seed is None:
            seed = mapping_forward(model.mapping_net, extract_features(x, model.extractor))
        d = adapters_mod.adapter_delta(model.adapters[0], seed)
    elif model.routed:
        d = adapters_mod.adapter_delta(model.adapters[int(task_id)])
    else:
        d = adapters_mod.adapter_delta(model.adapters[0])
    return W + d.array.reshape(W.shape)


def reference_forward(model: AdaptedModel, X, task_ids=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample forward pass with no tape; the oracle for :func:`tape_forward`."""
    X = np.asarray(X, dtype=np.float64)
    base = model.base
    seeds = [None] * len(X)
    if model.is_meta:
        seeds = [mapping_forward(model.mapping_net, extract_features(x, model.extractor)) for x in X]
        if model.seed_mode == "batch_mean":
            m = np.mean(seeds, axis=0)
            seeds = [m] * len(X)
    logits, embs = [], []
    for n, x in enumerate(X):
        tid = None if task_ids is None else task_ids[n]
        W = _effective_weight(model, x, tid, seeds[n])
        conv_w = W if model.target == "conv" else base.conv
        head_w = W if model.target == "head" else base.head
        z = conv2d_forward(x, conv_w, 1, base.padding).array + base.conv_bias
        e = activate(z, base.activation).mean(axis=(0, 1))
        embs.append(e)
        logits.append(e @ head_w + base.head_bias)
    return np.array(logits), np.array(embs)
