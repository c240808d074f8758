"""Adapter training over a frozen base model.

Training is single-threaded and deterministic: minibatch order for epoch
``e`` comes from ``default_rng([rng_seed, e])`` and nothing else draws
randomness, so a run resumed at an epoch boundary follows the same
trajectory as an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adapters import adapter_from_manifest, adapter_manifest, init_adapter
from .config import AdapterConfig, OptimConfig, PretrainConfig, RunConfig
from .data import Dataset
from .meta_net import (
    init_mapping_net,
    make_extractor,
    mapping_from_manifest,
    mapping_manifest,
    FeatureExtractor,
)
from .model import AdaptedModel, BaseModel, init_base, tape_forward
from .serialization import dump_json, read_checkpoint, write_checkpoint


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizers


def init_optimizer_state(params: dict, optimizer: str) -> dict:
    if optimizer == "sgd":
        return {"t": 0, "m": {k: np.zeros_like(v) for k, v in params.items()}}
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def optimizer_step(params: dict, grads: dict, opt_state: dict, cfg) -> tuple[dict, dict]:
    """One SGD-with-momentum or Adam update; returns new params and state."""
    t = opt_state["t"] + 1
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if cfg.optimizer == "sgd":
            m = cfg.momentum * opt_state["m"][k] + g
            step = m
        else:
            m = cfg.beta1 * opt_state["m"][k] + (1 - cfg.beta1) * g
            v = cfg.beta2 * opt_state["v"][k] + (1 - cfg.beta2) * g * g
            v_new[k] = v
            mhat = m / (1 - cfg.beta1**t)
            vhat = v / (1 - cfg.beta2**t)
            step = mhat / (np.sqrt(vhat) + cfg.eps)
        m_new[k] = m
        # lr == 0 must leave parameters bitwise untouched (p - 0*x can flip -0.0)
        new_params[k] = p - cfg.lr * step if cfg.lr != 0 else p
    out = {"t": t, "m": m_new}
    if cfg.optimizer == "adam":
        out["v"] = v_new
    return new_params, out


# ---------------------------------------------------------------------------
# state


@dataclass(eq=False)
class TrainState:
    model: AdaptedModel
    optim: OptimConfig
    rng_seed: int
    opt_state: dict | None = None
    epoch: int = 0
    step: int = 0

    @property
    def base(self) -> BaseModel:
        return self.model.base


@dataclass(eq=False)
class TrainReport:
    loss_curve: list[float]  # full-train-set loss before epoch 0, then after each epoch
    steps: int
    epochs: int
    param_count: int
    state: TrainState = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "loss_curve": [float(x) for x in self.loss_curve],
            "steps": self.steps,
            "epochs": self.epochs,
            "param_count": self.param_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def dataset_loss(model: AdaptedModel, data: Dataset, batch_size: int = 256) -> float:
    total = 0.0
    for start in range(0, len(data), batch_size):
        sub = data.subset(slice(start, start + batch_size))
        tape = ad.Tape()
        logits, _ = tape_forward(tape, model, sub.X, sub.task)
        total += float(ad.softmax_cross_entropy(logits, sub.y).value) * len(sub)
    return total / len(data)


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def loss_and_grads(model: AdaptedModel, X, y, task_ids=None, params: dict | None = None):
    """Mean cross-entropy of a batch and its gradients for all trainable params."""
    tape = ad.Tape()
    params = model.trainable_params() if params is None else params
    leaves = {k: tape.leaf(v, name=k, trainable=True) for k, v in params.items()}
    logits, _ = tape_forward(tape, model, X, task_ids, leaves)
    loss = ad.softmax_cross_entropy(logits, y)
    return float(loss.value), ad.backward(tape, loss)


def train(state: TrainState, data: Dataset, epochs: int | None = None) -> TrainReport:
    """Train ``state.model``'s adapters (and mapping net) up to ``epochs`` total epochs.

    Base weights never enter the trainable set.  Raises
    :class:`TrainingDiverged` if a minibatch loss is not finite.
    """
    cfg = state.optim
    epochs = cfg.epochs if epochs is None else epochs
    model = state.model
    params = model.trainable_params()
    opt = state.opt_state or init_optimizer_state(params, cfg.optimizer)
    step = state.step
    curve = [dataset_loss(model, data)]
    for epoch in range(state.epoch, epochs):
        if params:
            for idx in _batches(len(data), cfg.batch_size, state.rng_seed, epoch):
                sub = data.subset(idx)
                loss, grads = loss_and_grads(model, sub.X, sub.y, sub.task, params)
                if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise TrainingDiverged(
                        f"non-finite loss {loss} at epoch {epoch}, step {step}; "
                        f"lr={cfg.lr}, optimizer={cfg.optimizer}"
                    )
                params, opt = optimizer_step(params, grads, opt, cfg)
                model = model.with_params(params)
                step += 1
        curve.append(dataset_loss(model, data))
        if not np.isfinite(curve[-1]):
            raise TrainingDiverged(f"non-finite training loss after epoch {epoch}")
    new_state = dataclasses.replace(state, model=model, opt_state=opt, epoch=max(epochs, state.epoch), step=step)
    return TrainReport(curve, step, new_state.epoch, model.adapter_param_count(), new_state)


# ---------------------------------------------------------------------------
# construction


def pretrain_base(data: Dataset, geometry, cfg: PretrainConfig, num_classes: int, seed: int) -> BaseModel:
    """Train conv + head from scratch on the pretraining split, then freeze."""
    rng = np.random.default_rng([seed, 7001])
    base = init_base(geometry.kernel_size, data.X.shape[-1], geometry.features, num_classes, rng,
                     geometry.activation)
    params = {k: np.array(v) for k, v in base.params().items()}
    opt = init_optimizer_state(params, cfg.optimizer)
    ocfg = OptimConfig(optimizer=cfg.optimizer, lr=cfg.lr, batch_size=cfg.batch_size, epochs=cfg.epochs)
    for epoch in range(cfg.epochs):
        for idx in _batches(len(data), cfg.batch_size, seed + 104729, epoch):
            sub = data.subset(idx)
            tape = ad.Tape()
            leaves = {k: tape.leaf(v, name=k, trainable=True) for k, v in params.items()}
            z = ad.conv2d(tape.constant(sub.X), leaves["conv"], 1, base.padding)
            z = ad.activate(ad.add(z, leaves["conv_bias"]), base.activation)
            logits = ad.add(ad.einsum("nf,fc->nc", ad.mean(z, (1, 2)), leaves["head"]), leaves["head_bias"])
            loss = ad.softmax_cross_entropy(logits, sub.y)
            if not np.isfinite(loss.value):
                raise TrainingDiverged(f"pretraining diverged at epoch {epoch}")
            params, opt = optimizer_step(params, ad.backward(tape, loss), opt, ocfg)
    return BaseModel(activation=base.activation, **params)


def build_model(arm: AdapterConfig, base: BaseModel, cfg: RunConfig, seed: int) -> AdaptedModel:
    """Fresh adapters for one comparison arm on top of ``base``."""
    rng = np.random.default_rng([seed, 7002])
    if arm.variant == "original":
        return AdaptedModel(base)
    target_shape = base.conv.shape if arm.target == "conv" else base.head.shape
    if arm.variant == "multi_lora":
        inner = "conv_lora" if arm.target == "conv" else "lora"
        ads = tuple(init_adapter(inner, target_shape, arm.rank, rng, arm.scale)
                    for _ in range(cfg.tasks.num_tasks))
        return AdaptedModel(base, ads, arm.target, routed=True)
    is_conv_variant = arm.variant.startswith("conv_")
    shape = target_shape
    if not is_conv_variant and arm.target == "conv":
        shape = (int(np.prod(target_shape[:3])), target_shape[3])
    adapter = init_adapter(arm.variant, shape, arm.rank, rng, arm.scale)
    if not adapter.is_meta:
        return AdaptedModel(base, (adapter,), arm.target)
    e = cfg.extractor
    input_shape = (cfg.tasks.height, cfg.tasks.width, cfg.tasks.channels)
    extractor = make_extractor(e.kind, input_shape, np.random.default_rng([seed, 7003]), e.features, e.kernel_size)
    m = cfg.mapping
    net = init_mapping_net(extractor.output_dim, adapter.seed_shape, rng, m.hidden, m.depth,
                           m.activation, m.output_bias, m.output_gain)
    return AdaptedModel(base, (adapter,), arm.target, mapping_net=net, extractor=extractor,
                        seed_mode=m.seed_mode)


# ---------------------------------------------------------------------------
# checkpoints


def save_state(state: TrainState, directory) -> Path:
    """Write base, adapters, mapping net, extractor and optimizer moments.

    Layout: ``base/``, ``adapter{k}/``, ``mapping_net/``, ``extractor/``,
    ``optimizer/``, each a manifest plus MTK1 blobs, and ``state.json``.
    """
    directory = Path(directory)
    model = state.model
    write_checkpoint(directory / "base", {"variant": "base", "activation": model.base.activation},
                     model.base.params())
    for k, a in enumerate(model.adapters):
        write_checkpoint(directory / f"adapter{k}", adapter_manifest(a), a.factors())
    if model.is_meta:
        write_checkpoint(directory / "mapping_net", mapping_manifest(model.mapping_net),
                         model.mapping_net.params())
        fe = model.extractor
        blobs = {"kernel": fe.kernel} if fe.kernel is not None else {}
        write_checkpoint(directory / "extractor",
                         {"variant": "extractor", "kind": fe.kind, "input_shape": list(fe.input_shape)}, blobs)
    if state.opt_state is not None:
        blobs = {}
        for slot in ("m", "v"):
            for k, v in state.opt_state.get(slot, {}).items():
                blobs[f"{slot}.{k}"] = v
        write_checkpoint(directory / "optimizer", {"variant": "optimizer", "t": state.opt_state["t"]}, blobs)
    dump_json(
        {
            "epoch": state.epoch,
            "step": state.step,
            "rng_seed": state.rng_seed,
            "optim": dataclasses.asdict(state.optim),
            "num_adapters": len(model.adapters),
            "target": model.target,
            "routed": model.routed,
            "seed_mode": model.seed_mode,
        },
        directory / "state.json",
    )
    return directory


def load_state(directory) -> TrainState:
    directory = Path(directory)
    meta = json.loads((directory / "state.json").read_text())
    bman, barr = read_checkpoint(directory / "base")
    base = BaseModel(activation=bman["activation"], **barr)
    ads = tuple(adapter_from_manifest(*read_checkpoint(directory / f"adapter{k}"))
                for k in range(meta["num_adapters"]))
    net = extractor = None
    if (directory / "mapping_net").exists():
        net = mapping_from_manifest(*read_checkpoint(directory / "mapping_net"))
        eman, earr = read_checkpoint(directory / "extractor")
        extractor = FeatureExtractor(eman["kind"], tuple(eman["input_shape"]), earr.get("kernel"))
    model = AdaptedModel(base, ads, meta["target"], meta["routed"], net, extractor, meta["seed_mode"])
    opt_state = None
    if (directory / "optimizer").exists():
        oman, oarr = read_checkpoint(directory / "optimizer")
        opt_state = {"t": oman["t"], "m": {}}
        for name, v in oarr.items():
            slot, key = name.split(".", 1)
            opt_state.setdefault(slot, {})[key] = v
    return TrainState(model, OptimConfig(**meta["optim"]), meta["rng_seed"], opt_state, meta["epoch"], meta["step"])
