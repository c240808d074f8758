"""Oracle-equivalence and gradient-check suites, grouped by module.

Each suite draws random small instances from a seeded generator, compares
the implementation against an independent evaluation (brute-force loops,
finite differences, or a second code path) and reports the largest error
it saw.  :func:`run_suites` is what ``metalora verify`` executes.
"""

from __future__ import annotations

import dataclasses
import time
import traceback
import warnings
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import adapters as adapters_mod
from . import autodiff as ad
from . import oracles
from .adapters import init_adapter, param_count
from .data import Dataset
from .meta_net import (
    Layer,
    MappingNet,
    extract_features,
    extract_features_batch,
    init_mapping_net,
    make_extractor,
    mapping_forward,
)
from .model import AdaptedModel, BaseModel, forward_adapted, init_base, reference_forward
from .tensor_core import (
    DummyTensorSpec,
    build_dummy_tensor,
    contract,
    conv1d_via_dummy,
    conv2d_forward,
    cp_reconstruct,
    tr_reconstruct,
)
from .config import OptimConfig
from .training import TrainState, loss_and_grads, train

EXACT_TOL = 1e-12
GRAD_TOL = 1e-4
FD_STEP = 1e-5


@dataclass
class SuiteResult:
    module: str
    name: str
    passed: bool
    cases: int
    max_error: float
    tolerance: float
    seconds: float
    detail: str = ""

    @property
    def full_name(self) -> str:
        return f"{self.module}.{self.name}"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["suite"] = self.full_name
        return d

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        s = (f"{status} {self.full_name:<40} cases={self.cases:<5} "
             f"max_err={self.max_error:.3e} tol={self.tolerance:.0e} ({self.seconds:.2f}s)")
        return s + (f"\n     {self.detail}" if self.detail else "")


class _Tracker:
    """Running max error plus the first offending case."""

    def __init__(self, tol: float):
        self.tol = tol
        self.cases = 0
        self.max_error = 0.0
        self.first_bad = ""

    def check(self, err: float, what: str) -> None:
        self.cases += 1
        if not np.isfinite(err) or err > self.max_error:
            self.max_error = float(err) if np.isfinite(err) else float("inf")
        if (not np.isfinite(err) or err > self.tol) and not self.first_bad:
            self.first_bad = f"first failure: {what}: error {err:.3e} > {self.tol:.0e}"

    def fail(self, what: str) -> None:
        self.cases += 1
        self.max_error = float("inf")
        if not self.first_bad:
            self.first_bad = f"first failure: {what}"


_SUITES: list[tuple[str, str, float, Callable]] = []


def suite(module: str, name: str, tol: float = EXACT_TOL):
    def deco(fn):
        _SUITES.append((module, name, tol, fn))
        return fn
    return deco


def suite_names() -> list[str]:
    return [f"{m}.{n}" for m, n, _, _ in _SUITES]


def modules() -> list[str]:
    return sorted({m for m, _, _, _ in _SUITES})


# ---------------------------------------------------------------------------
# tensor_core


@suite("tensor_core", "contract_bruteforce")
def _contract(rng, t: _Tracker):
    while t.cases < 120:
        na, nb = rng.integers(1, 4, size=2)
        sa = list(rng.integers(1, 5, size=na))
        sb = list(rng.integers(1, 5, size=nb))
        n_pairs = int(rng.integers(0, min(na, nb) + 1))
        ia = rng.permutation(na)[:n_pairs]
        ib = rng.permutation(nb)[:n_pairs]
        for i, j in zip(ia, ib):
            sb[j] = sa[i]
        pairs = [(int(i), int(j)) for i, j in zip(ia, ib)]
        a, b = rng.standard_normal(sa), rng.standard_normal(sb)
        got = contract(a, b, pairs).array
        t.check(oracles.rel_error(got, oracles.contract(a, b, pairs)), f"shapes {sa}, {sb}, pairs {pairs}")


@suite("tensor_core", "conv1d_bruteforce")
def _conv1d(rng, t: _Tracker):
    while t.cases < 120:
        alpha, beta = int(rng.integers(1, 9)), int(rng.integers(1, 6))
        s, p = int(rng.integers(1, 4)), int(rng.integers(0, 3))
        try:
            spec = DummyTensorSpec.for_geometry(alpha, beta, s, p)
        except ValueError:
            continue
        a, b = rng.standard_normal(alpha), rng.standard_normal(beta)
        got = conv1d_via_dummy(a, b, spec).array
        want = oracles.conv1d(a, b, s, p, spec.output_len)
        t.check(oracles.rel_error(got, want), f"alpha={alpha} beta={beta} s={s} p={p}")


@suite("tensor_core", "conv2d_bruteforce")
def _conv2d(rng, t: _Tracker):
    while t.cases < 100:
        H, W = (int(v) for v in rng.integers(1, 8, size=2))
        K = int(rng.integers(1, 4))
        I, O = (int(v) for v in rng.integers(1, 4, size=2))
        s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        try:
            DummyTensorSpec.for_geometry(H, K, s, p)
            DummyTensorSpec.for_geometry(W, K, s, p)
        except ValueError:
            continue
        x, w = rng.standard_normal((H, W, I)), rng.standard_normal((K, K, I, O))
        got = conv2d_forward(x, w, s, p).array
        t.check(oracles.rel_error(got, oracles.conv2d(x, w, s, p)), f"x {x.shape} w {w.shape} s={s} p={p}")


@suite("tensor_core", "cp_bruteforce")
def _cp(rng, t: _Tracker):
    while t.cases < 100:
        N, R = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        dims = rng.integers(1, 6, size=N)
        factors = [rng.standard_normal((int(d), R)) for d in dims]
        lam = rng.standard_normal(R)
        got = cp_reconstruct(factors, lam).array
        t.check(oracles.rel_error(got, oracles.cp(factors, lam)), f"dims {list(dims)} R={R}")


@suite("tensor_core", "tr_bruteforce")
def _tr(rng, t: _Tracker):
    while t.cases < 100:
        N = int(rng.integers(1, 4))
        ranks = [int(r) for r in rng.integers(1, 4, size=N)]
        dims = [int(d) for d in rng.integers(1, 6, size=N)]
        cores = [rng.standard_normal((ranks[n], dims[n], ranks[(n + 1) % N])) for n in range(N)]
        got = tr_reconstruct(cores).array
        t.check(oracles.rel_error(got, oracles.tr(cores)), f"dims {dims} ranks {ranks}")


@suite("tensor_core", "dummy_law")
def _dummy_law(rng, t: _Tracker):
    # exhaustive, no sampling
    for alpha in range(1, 13):
        for beta in range(1, 6):
            for s in (1, 2, 3):
                for p in (0, 1, 2):
                    out = (alpha + 2 * p - beta) // s + 1
                    valid = out >= 1 and all(
                        s * jp - p <= alpha - 1 and s * jp - p + beta - 1 >= 0 for jp in range(out)
                    )
                    what = f"alpha={alpha} beta={beta} s={s} p={p}"
                    try:
                        spec = DummyTensorSpec.for_geometry(alpha, beta, s, p)
                    except ValueError:
                        if valid:
                            t.fail(f"{what}: valid geometry rejected")
                        else:
                            t.check(0.0, what)
                        continue
                    if not valid:
                        t.fail(f"{what}: invalid geometry accepted")
                        continue
                    P = build_dummy_tensor(spec).array
                    if P.shape != (alpha, out, beta):
                        t.fail(f"{what}: shape {P.shape}")
                        continue
                    bad = 0
                    for j in range(alpha):
                        for jp in range(out):
                            for k in range(beta):
                                bad += int(P[j, jp, k] != float(j == s * jp + k - p))
                    t.check(float(bad), what)


# ---------------------------------------------------------------------------
# adapters


def _rand_adapter(variant, rng, I=None, O=None, K=None, R=None, scale=None):
    R = R or int(rng.integers(1, 4))
    O = O or int(rng.integers(1, 6))
    scale = float(rng.choice([1.0, 0.5, 2.0])) if scale is None else scale
    if ADAPTER_IS_CONV[variant]:
        K = K or int(rng.choice([1, 3]))
        I = I or int(rng.integers(1, 4))
        shape = (K, K, I, O)
    else:
        I = I or int(rng.integers(1, 6))
        shape = (I, O)
    return init_adapter(variant, shape, R, rng, scale=scale, zero_last=False)


ADAPTER_IS_CONV = {v: cls.is_conv for v, cls in adapters_mod.ADAPTER_TYPES.items()}


@suite("adapters", "factored_conv_equivalence")
def _factored(rng, t: _Tracker):
    while t.cases < 60:
        H, W = (int(v) for v in rng.integers(2, 8, size=2))
        K = int(rng.integers(1, 4))
        I, O, R = (int(v) for v in rng.integers(1, 5, size=3))
        s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        try:
            DummyTensorSpec.for_geometry(H, K, s, p)
            DummyTensorSpec.for_geometry(W, K, s, p)
        except ValueError:
            continue
        a = init_adapter("conv_lora", (K, K, I, O), R, rng, scale=float(rng.choice([1.0, 0.5])), zero_last=False)
        x = rng.standard_normal((H, W, I))
        got = adapters_mod.conv_lora_apply_factored(x, a, s, p).array
        want = conv2d_forward(x, adapters_mod.conv_lora_delta(a), s, p).array
        t.check(oracles.rel_error(got, want), f"H={H} W={W} K={K} I={I} O={O} R={R} s={s} p={p}")


@suite("adapters", "meta_cp_bruteforce")
def _meta_cp(rng, t: _Tracker):
    while t.cases < 100:
        a = _rand_adapter("meta_cp", rng)
        c = rng.standard_normal(a.seed_shape)
        got = adapters_mod.meta_cp_delta(a, c).array
        want = a.scale * oracles.meta_cp(a.A, a.B, c)
        t.check(oracles.rel_error(got, want), f"A {a.A.shape} B {a.B.shape}")
        # same object read as a 2-factor CP tensor with weights c
        cp = a.scale * cp_reconstruct([a.A, a.B.T], c).array
        t.check(oracles.rel_error(got, cp), f"CP cross-check A {a.A.shape}")


@suite("adapters", "meta_tr_bruteforce")
def _meta_tr(rng, t: _Tracker):
    while t.cases < 100:
        a = _rand_adapter("meta_tr", rng)
        R = a.rank
        C = rng.standard_normal((R, R))
        got = adapters_mod.meta_tr_delta(a, C).array
        want = a.scale * oracles.meta_tr(a.A, a.B, C)
        t.check(oracles.rel_error(got, want), f"A {a.A.shape} B {a.B.shape}")
        # seed as a third ring core with a singleton mode
        ring = a.scale * tr_reconstruct([a.A, a.B, C.reshape(R, 1, R)]).array[:, :, 0]
        t.check(oracles.rel_error(got, ring), f"TR cross-check A {a.A.shape}")


@suite("adapters", "conv_meta_cp_bruteforce")
def _conv_meta_cp(rng, t: _Tracker):
    while t.cases < 100:
        a = _rand_adapter("conv_meta_cp", rng)
        c = rng.standard_normal(a.seed_shape)
        got = adapters_mod.conv_meta_cp_delta(a, c).array
        t.check(oracles.rel_error(got, a.scale * oracles.conv_rank_sum(a.A, a.B, c)), f"A {a.A.shape}")


@suite("adapters", "conv_meta_tr_bruteforce")
def _conv_meta_tr(rng, t: _Tracker):
    while t.cases < 100:
        a = _rand_adapter("conv_meta_tr", rng)
        C = rng.standard_normal((a.rank, a.rank))
        got = adapters_mod.conv_meta_tr_delta(a, C).array
        want = a.scale * oracles.meta_tr(a.A, a.B, C).reshape(a.delta_shape)
        t.check(oracles.rel_error(got, want), f"A {a.A.shape} kernel {a.kernel_shape}")


def _small_base(rng, K=3, I=2, F=3, C=3, activation="tanh") -> BaseModel:
    b = init_base(K, I, F, C, rng, activation)
    return dataclasses.replace(b, conv_bias=0.1 * rng.standard_normal(F), head_bias=0.1 * rng.standard_normal(C))


def _zero_net(input_dim, seed_shape, value=0.0) -> MappingNet:
    out = int(np.prod(seed_shape))
    return MappingNet((Layer(np.zeros((out, input_dim)), np.full(out, value)),), seed_shape)


def _meta_model(variant, target, rng, base, H=5, W=5, net=None, extractor_kind="pooled-conv",
                seed_mode="per_sample", mapping_activation="tanh"):
    shape = base.conv.shape if target == "conv" else base.head.shape
    if not ADAPTER_IS_CONV[variant] and target == "conv":
        shape = (int(np.prod(shape[:3])), shape[3])
    a = init_adapter(variant, shape, int(rng.integers(1, 3)), rng, scale=1.0, zero_last=False)
    fe = make_extractor(extractor_kind, (H, W, base.conv.shape[2]), rng, features=3, kernel_size=3)
    if net is None:
        net = init_mapping_net(fe.output_dim, a.seed_shape, rng, depth=2, activation=mapping_activation,
                               output_bias="neutral", output_gain=1.0)
        net = net.with_params({f"b{k}": 0.3 * rng.standard_normal(l.bias.shape) + l.bias
                               for k, l in enumerate(net.layers)})
    elif callable(net):
        net = net(fe.output_dim, a.seed_shape)
    return AdaptedModel(base, (a,), target, mapping_net=net, extractor=fe, seed_mode=seed_mode)


META_CASES = [("meta_cp", "head"), ("meta_cp", "conv"), ("meta_tr", "head"), ("meta_tr", "conv"),
              ("conv_meta_cp", "conv"), ("conv_meta_tr", "conv")]


@suite("adapters", "zero_seed_collapse")
def _zero_seed(rng, t: _Tracker):
    for rep in range(3):
        for variant, target in META_CASES:
            base = _small_base(rng)
            model = _meta_model(variant, target, rng, base, net=_zero_net)
            X = rng.standard_normal((4, 5, 5, 2))
            seed = np.zeros(model.adapters[0].seed_shape)
            delta = adapters_mod.adapter_delta(model.adapters[0], seed).array
            t.check(float(np.max(np.abs(delta))), f"{variant}: zero seed delta")
            want, _ = reference_forward(AdaptedModel(base), X)
            got_ref, _ = reference_forward(model, X)
            got_tape, _ = forward_adapted(model, X)
            t.check(oracles.rel_error(got_ref, want), f"{variant}/{target}: reference logits vs base")
            t.check(oracles.rel_error(got_tape, want), f"{variant}/{target}: tape logits vs base")


@suite("adapters", "ones_seed_collapse", tol=0.0)
def _ones_seed(rng, t: _Tracker):
    for rep in range(20):
        I, O, R, K = (int(v) for v in rng.integers(1, 6, size=4))
        A, B = rng.standard_normal((I, R)), rng.standard_normal((R, O))
        cp = adapters_mod.MetaCPAdapter(A, B)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # R may exceed min(I, O) here
            lora = adapters_mod.MatrixLoRA(A, B)
        got = adapters_mod.meta_cp_delta(cp, np.ones(R)).array
        t.check(float(not np.array_equal(got, adapters_mod.matrix_lora_delta(lora).array)), f"I={I} O={O} R={R}")
        Ac = rng.standard_normal((K, K, I, R))
        ccp = adapters_mod.ConvMetaCPAdapter(Ac, B)
        clora = adapters_mod.ConvLoRA(Ac, B)
        got = adapters_mod.conv_meta_cp_delta(ccp, np.ones(R)).array
        t.check(float(not np.array_equal(got, adapters_mod.conv_lora_delta(clora).array)), f"conv K={K} R={R}")
    # end to end: mapping net pinned at all-ones against the static model
    for variant, static, target in (("meta_cp", "lora", "head"), ("conv_meta_cp", "conv_lora", "conv")):
        base = _small_base(rng)
        model = _meta_model(variant, target, rng, base, net=lambda d, s: _zero_net(d, s, 1.0))
        a = model.adapters[0]
        cls = adapters_mod.ADAPTER_TYPES[static]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            st = AdaptedModel(base, (cls(a.A, a.B, a.scale),), target)
        X = rng.standard_normal((3, 5, 5, 2))
        got, _ = reference_forward(model, X)
        want, _ = reference_forward(st, X)
        t.check(float(not np.array_equal(got, want)), f"{variant} logits vs {static}")


@suite("adapters", "param_count_arithmetic", tol=0.0)
def _param_count(rng, t: _Tracker):
    closed = {
        "lora": lambda I, O, R, K: I * R + R * O,
        "meta_cp": lambda I, O, R, K: I * R + R * O,
        "meta_tr": lambda I, O, R, K: R * I * R + R * O * R,
        "conv_lora": lambda I, O, R, K: K * K * I * R + R * O,
        "conv_meta_cp": lambda I, O, R, K: K * K * I * R + R * O,
        "conv_meta_tr": lambda I, O, R, K: R * K * K * I * R + R * O * R,
    }
    for variant, formula in closed.items():
        for _ in range(20):
            I, O, R = (int(v) for v in rng.integers(1, 9, size=3))
            K = int(rng.choice([1, 3, 5]))
            shape = (K, K, I, O) if ADAPTER_IS_CONV[variant] else (I, O)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                a = init_adapter(variant, shape, R, rng)
            t.check(float(abs(param_count(a) - formula(I, O, R, K))), f"{variant} I={I} O={O} R={R} K={K}")
    # 9IR + RO < 9IO for R <= 4, I, O >= 8, since 9IO - 36I - 4O >= 68O - 288 > 0
    for R in range(1, 5):
        for I in range(8, 65):
            for O in range(8, 65):
                t.check(float(closed["conv_lora"](I, O, R, 3) >= 9 * I * O), f"budget R={R} I={I} O={O}")
    for R in range(1, 5):
        for I, O in ((8, 8), (8, 32), (16, 8), (32, 32)):
            a = init_adapter("conv_lora", (3, 3, I, O), R, rng)
            t.check(float(param_count(a) >= 9 * I * O), f"instance R={R} I={I} O={O}")


# ---------------------------------------------------------------------------
# meta_net


@suite("meta_net", "mapping_forward_oracle")
def _mapping(rng, t: _Tracker):
    while t.cases < 100:
        depth = int(rng.integers(1, 4))
        R = int(rng.integers(1, 4))
        seed_shape = (R,) if rng.random() < 0.5 else (R, R)
        F = int(rng.integers(1, 7))
        act = str(rng.choice(["tanh", "relu", "identity"]))
        net = init_mapping_net(F, seed_shape, rng, hidden=int(rng.integers(1, 6)), depth=depth,
                               activation=act, output_gain=1.0)
        f = rng.standard_normal(F)
        got = mapping_forward(net, f)
        want = oracles.mlp([(l.weight, l.bias, l.activation) for l in net.layers], f).reshape(seed_shape)
        t.check(oracles.rel_error(got, want), f"F={F} depth={depth} act={act} seed {seed_shape}")


@suite("meta_net", "extractor_oracle")
def _extractor(rng, t: _Tracker):
    while t.cases < 40:
        H, W, I = (int(v) for v in rng.integers(2, 7, size=3))
        kind = "pooled-conv" if t.cases % 2 else "raw-flatten"
        fe = make_extractor(kind, (H, W, I), rng, features=int(rng.integers(1, 5)), kernel_size=int(rng.choice([1, 3])))
        X = rng.standard_normal((3, H, W, I))
        batch = extract_features_batch(X, fe)
        for n in range(3):
            single = extract_features(X[n], fe)
            if kind == "raw-flatten":
                want = X[n].reshape(-1)
            else:
                want = oracles.conv2d(X[n], fe.kernel, 1, fe.padding).mean(axis=(0, 1))
            t.check(max(oracles.rel_error(single, want), oracles.rel_error(batch[n], want)), f"{kind} {(H, W, I)}")


def _tape_mapping(tape, net: MappingNet, f, leaves):
    h = f
    for k, layer in enumerate(net.layers):
        z = ad.add(ad.einsum("oi,i->o", leaves[f"W{k}"], h), leaves[f"b{k}"])
        h = ad.activate(z, layer.activation)
    return h


@suite("meta_net", "mapping_gradcheck", tol=GRAD_TOL)
def _mapping_grad(rng, t: _Tracker):
    for rep in range(20):
        R = int(rng.integers(1, 4))
        seed_shape = (R,) if rep % 2 else (R, R)
        F = int(rng.integers(1, 6))
        act = "tanh" if rep % 3 else "relu"
        net = init_mapping_net(F, seed_shape, rng, depth=int(rng.integers(1, 4)), activation=act, output_gain=1.0)
        f0 = rng.standard_normal(F)
        proj = rng.standard_normal(int(np.prod(seed_shape)))
        params = {"f": f0, **net.params()}

        def loss(p):
            n = net.with_params({k: v for k, v in p.items() if k != "f"})
            return float(mapping_forward(n, p["f"]).reshape(-1) @ proj)

        tape = ad.Tape()
        leaves = {k: tape.leaf(v, name=k, trainable=True) for k, v in params.items()}
        out = _tape_mapping(tape, net, leaves["f"], leaves)
        grads = ad.backward(tape, ad.einsum("o,o->", out, proj))
        for name, v in params.items():
            fd = oracles.central_difference(lambda x: loss({**params, name: x}), v, FD_STEP)
            t.check(_grad_error(grads[name], fd), f"rep {rep} {name} act={act}")


# ---------------------------------------------------------------------------
# training


def _grad_error(ga, fd) -> float:
    scale = max(float(np.max(np.abs(fd))), float(np.max(np.abs(ga))), 1e-6)
    return float(np.max(np.abs(ga - fd))) / scale


def _xent(logits, y) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


GRAD_CASES = [
    ("lora", "head"), ("lora", "conv"), ("conv_lora", "conv"), ("multi_lora", "conv"), ("multi_lora", "head"),
] + META_CASES


def _grad_model(variant, target, rng, k):
    base = _small_base(rng, activation="tanh" if k % 4 else "relu")
    if variant == "multi_lora":
        inner = "conv_lora" if target == "conv" else "lora"
        shape = base.conv.shape if target == "conv" else base.head.shape
        ads = tuple(init_adapter(inner, shape, int(rng.integers(1, 3)), rng, zero_last=False) for _ in range(3))
        return AdaptedModel(base, ads, target, routed=True)
    if variant in ("lora", "conv_lora"):
        shape = base.conv.shape if target == "conv" else base.head.shape
        if variant == "lora" and target == "conv":
            shape = (int(np.prod(shape[:3])), shape[3])
        return AdaptedModel(base, (init_adapter(variant, shape, 2, rng, scale=0.7, zero_last=False),), target)
    return _meta_model(variant, target, rng, base,
                       extractor_kind="raw-flatten" if k % 3 == 0 else "pooled-conv",
                       seed_mode="batch_mean" if k % 5 == 4 else "per_sample",
                       mapping_activation="relu" if k % 7 == 3 else "tanh")


def gradcheck_configs(n_seeds: int = 2):
    return [(v, tg, k) for k in range(n_seeds) for v, tg in GRAD_CASES]


@suite("training", "gradcheck", tol=GRAD_TOL)
def _gradcheck(rng, t: _Tracker):
    for idx, (variant, target, rep) in enumerate(gradcheck_configs()):
        model = _grad_model(variant, target, rng, idx)
        X = rng.standard_normal((3, 5, 5, 2))
        y = rng.integers(0, 3, size=3)
        tids = rng.integers(0, 3, size=3) if model.routed else None
        params = {k: np.array(v) for k, v in model.trainable_params().items()}
        _, grads = loss_and_grads(model, X, y, tids, params)

        def loss(p):
            logits, _ = reference_forward(model.with_params(p), X, tids)
            return _xent(logits, y)

        for name, v in params.items():
            fd = oracles.central_difference(lambda x: loss({**params, name: x}), v, FD_STEP)
            t.check(_grad_error(grads[name], fd), f"{variant}/{target} config {idx}: {name}")


@suite("training", "tape_vs_reference")
def _tape_ref(rng, t: _Tracker):
    for idx, (variant, target, rep) in enumerate(gradcheck_configs()):
        model = _grad_model(variant, target, rng, idx)
        X = rng.standard_normal((4, 5, 5, 2))
        tids = rng.integers(0, 3, size=4) if model.routed else None
        lt, et = forward_adapted(model, X, tids)
        lr_, er = reference_forward(model, X, tids)
        t.check(max(oracles.rel_error(lt, lr_), oracles.rel_error(et, er)), f"{variant}/{target}")


@suite("training", "xent_grad_rows_sum_to_zero")
def _xent_rows(rng, t: _Tracker):
    for _ in range(50):
        N, C = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        tape = ad.Tape()
        z = tape.leaf(3 * rng.standard_normal((N, C)), name="z", trainable=True)
        g = ad.backward(tape, ad.softmax_cross_entropy(z, rng.integers(0, C, size=N)))["z"]
        t.check(float(np.max(np.abs(g.sum(axis=1)))), f"N={N} C={C}")


def _toy_data(rng, n=20, H=5, W=5, I=2, C=3) -> Dataset:
    return Dataset(rng.standard_normal((n, H, W, I)), rng.integers(0, C, size=n), rng.integers(0, 3, size=n))


@suite("training", "freeze_100_steps", tol=0.0)
def _freeze(rng, t: _Tracker):
    for variant, target in (("conv_meta_tr", "conv"), ("lora", "head"), ("multi_lora", "conv")):
        model = _grad_model(variant, target, rng, 1)
        before = {k: v.tobytes() for k, v in model.base.params().items()}
        data = _toy_data(rng)
        state = TrainState(model, OptimConfig(lr=0.05, batch_size=4, epochs=20), rng_seed=3)
        rep = train(state, data)
        if rep.steps != 100:
            t.fail(f"{variant}: expected 100 steps, ran {rep.steps}")
            continue
        after = rep.state.model.base.params()
        changed = sum(after[k].tobytes() != before[k] for k in before)
        moved = any(not np.array_equal(a, b) for a, b in
                    zip(model.trainable_params().values(), rep.state.model.trainable_params().values()))
        t.check(float(changed), f"{variant}: base tensors changed")
        t.check(float(not moved), f"{variant}: adapters did not move")


@suite("training", "determinism", tol=0.0)
def _determinism(rng, t: _Tracker):
    for variant, target in (("conv_meta_cp", "conv"), ("meta_tr", "head"), ("multi_lora", "head")):
        model = _grad_model(variant, target, rng, 2)
        data = _toy_data(rng)
        cfg = OptimConfig(lr=0.05, batch_size=4, epochs=3)
        r1 = train(TrainState(model, cfg, rng_seed=11), data)
        r2 = train(TrainState(model, cfg, rng_seed=11), data)
        same = r1.to_json() == r2.to_json() and all(
            a.tobytes() == b.tobytes()
            for a, b in zip(r1.state.model.trainable_params().values(), r2.state.model.trainable_params().values())
        )
        t.check(float(not same), f"{variant}: repeated run differs")
        r0 = train(TrainState(model, dataclasses.replace(cfg, lr=0.0), rng_seed=11), data)
        frozen = all(a.tobytes() == b.tobytes()
                     for a, b in zip(model.trainable_params().values(), r0.state.model.trainable_params().values()))
        t.check(float(not frozen or len(set(r0.loss_curve)) != 1), f"{variant}: lr=0 moved parameters")


# ---------------------------------------------------------------------------
# runner


def run_suites(filter_module: str | None = None, seed: int = 0) -> list[SuiteResult]:
    if filter_module is not None and filter_module not in modules():
        raise ValueError(f"unknown module {filter_module!r}; choose from {modules()}")
    results = []
    for module, name, tol, fn in _SUITES:
        if filter_module is not None and module != filter_module:
            continue
        rng = np.random.default_rng([seed, zlib.crc32(f"{module}.{name}".encode())])
        tracker = _Tracker(tol)
        start = time.perf_counter()
        detail = ""
        try:
            fn(rng, tracker)
            passed = tracker.cases > 0 and tracker.max_error <= tol
            detail = tracker.first_bad
        except Exception as exc:  # a crashing suite is a failing suite
            passed = False
            tb = traceback.extract_tb(exc.__traceback__)[-1]
            detail = f"raised {type(exc).__name__}: {exc} ({tb.filename.rsplit('/', 1)[-1]}:{tb.lineno})"
        results.append(SuiteResult(module, name, passed, tracker.cases, tracker.max_error, tol,
                                   time.perf_counter() - start, detail))
    return results


def summarize(results: list[SuiteResult]) -> dict:
    failed = [r for r in results if not r.passed]
    return {
        "passed": not failed,
        "num_suites": len(results),
        "num_failed": len(failed),
        "failed_suites": [r.full_name for r in failed],
        "first_failure": failed[0].full_name + ": " + failed[0].detail if failed else None,
        "suites": [r.to_dict() for r in results],
    }


def format_report(results: list[SuiteResult]) -> str:
    lines = [r.line() for r in results]
    failed = [r for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} suites passed")
    if failed:
        lines.append(f"first failure: {failed[0].full_name}")
    return "\n".join(lines)
