"""Hard-parameter-sharing multi-task model, loss weighting and local SGD training."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .nn import LayerStack, sgd_step, softmax_cross_entropy

MAIN = "main"
AUXILIARY = "auxiliary"

FEDAUX = "fedaux"
MTDNN = "mtdnn"


@dataclass(frozen=True)
class TaskSpec:
    id: str
    role: str
    num_classes: int

    def __post_init__(self):
        if self.role not in (MAIN, AUXILIARY):
            raise ConfigError(f"task {self.id!r}: role must be 'main' or 'auxiliary', got {self.role!r}")
        if self.num_classes < 2:
            raise ConfigError(f"task {self.id!r}: num_classes must be >= 2")


class HardSharedModel:
    """A shared trunk followed by one head stack per task.

    The flat parameter vector is the trunk segment followed by each head's
    segment in declared task order.
    """

    def __init__(self, trunk: LayerStack, heads: Mapping[str, LayerStack], tasks: Sequence[TaskSpec]):
        self.trunk = trunk
        self.tasks = tuple(tasks)
        ids = [t.id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate task ids in {ids}")
        if set(ids) != set(heads):
            raise ConfigError(f"heads {sorted(heads)} do not match tasks {ids}")
        self.heads = {tid: heads[tid] for tid in ids}
        for task in self.tasks:
            head = self.heads[task.id]
            if head.input_shape != trunk.output_shape:
                raise ConfigError(
                    f"head {task.id!r} input shape {head.input_shape} != trunk output {trunk.output_shape}"
                )
            if head.output_shape != (task.num_classes,):
                raise ConfigError(
                    f"head {task.id!r} emits {head.output_shape}, task declares {task.num_classes} classes"
                )
        bounds = [0, trunk.n_params]
        for tid in ids:
            bounds.append(bounds[-1] + self.heads[tid].n_params)
        self.trunk_slice = slice(0, trunk.n_params)
        self.head_slices = {tid: slice(bounds[i + 1], bounds[i + 2]) for i, tid in enumerate(ids)}
        self.n_params = bounds[-1]

    @property
    def task_ids(self):
        return [t.id for t in self.tasks]

    @property
    def main_task(self) -> TaskSpec | None:
        mains = [t for t in self.tasks if t.role == MAIN]
        return mains[0] if len(mains) == 1 else None

    @property
    def aux_tasks(self):
        return [t for t in self.tasks if t.role == AUXILIARY]

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        parts = [self.trunk.init_params(rng)] + [self.heads[tid].init_params(rng) for tid in self.task_ids]
        return np.concatenate(parts)

    def forward(self, params: np.ndarray, x: np.ndarray):
        """Per-task logits in declared order, plus a cache for :meth:`backward`."""
        if params.shape != (self.n_params,):
            raise ConfigError(f"parameter vector has shape {params.shape}, expected ({self.n_params},)")
        features, trunk_cache = self.trunk.forward(params[self.trunk_slice], x)
        logits, head_caches = {}, {}
        for tid in self.task_ids:
            logits[tid], head_caches[tid] = self.heads[tid].forward(params[self.head_slices[tid]], features)
        return logits, (trunk_cache, head_caches)

    def backward(self, params: np.ndarray, cache, dlogits: Mapping[str, np.ndarray]) -> np.ndarray:
        """Flat gradient given already-weighted logit gradients per task.

        Tasks absent from ``dlogits`` contribute nothing; their head segments
        stay exactly zero.
        """
        trunk_cache, head_caches = cache
        grads = np.zeros(self.n_params)
        dfeat = None
        for tid in self.task_ids:
            if tid not in dlogits:
                continue
            sl = self.head_slices[tid]
            dfeat_t, grads[sl] = self.heads[tid].backward(params[sl], head_caches[tid], dlogits[tid])
            dfeat = dfeat_t if dfeat is None else dfeat + dfeat_t
        if dfeat is not None:
            _, grads[self.trunk_slice] = self.trunk.backward(params[self.trunk_slice], trunk_cache, dfeat)
        return grads


def mtl_forward(model: HardSharedModel, params: np.ndarray, x: np.ndarray):
    return model.forward(params, x)


def sample_rlw(rng: np.random.Generator, n: int, raw: np.ndarray | None = None) -> np.ndarray:
    """Random loss weights: standard-normal draws mapped onto the simplex by softmax.

    ``raw`` bypasses sampling (used to pin the pre-softmax vector).
    """
    if n < 1:
        raise ConfigError("random loss weighting needs at least one task in scope")
    z = rng.standard_normal(n) if raw is None else np.asarray(raw, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass(frozen=True)
class WeightingStrategy:
    """How per-task losses are combined.

    ``mode`` is ``"fedaux"`` (main weight fixed at 1, weights over auxiliary
    tasks) or ``"mtdnn"`` (weights over every task). ``resample`` controls how
    often RLW weights are redrawn: ``"batch"``, ``"epoch"`` or ``"round"``.
    With ``elw_normalized=False`` equal weighting uses weight 1 per task (a
    plain loss sum) instead of ``1/n``.
    """

    kind: str = "rlw"
    mode: str = FEDAUX
    elw_weights: tuple | None = None
    resample: str = "batch"
    elw_normalized: bool = True

    def __post_init__(self):
        if self.kind not in ("elw", "rlw"):
            raise ConfigError(f"unknown weighting kind {self.kind!r}")
        if self.mode not in (FEDAUX, MTDNN):
            raise ConfigError(f"unknown loss mode {self.mode!r}")
        if self.resample not in ("batch", "epoch", "round"):
            raise ConfigError(f"unknown RLW resampling granularity {self.resample!r}")
        if self.elw_weights is not None:
            w = np.asarray(self.elw_weights, dtype=np.float64)
            if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
                raise ConfigError("ELW weights must be nonnegative and sum to 1")

    def scope(self, model: HardSharedModel) -> list:
        """Task ids the weight vector ranges over."""
        if self.mode == FEDAUX:
            return [t.id for t in model.aux_tasks]
        return model.task_ids

    def draw(self, model: HardSharedModel, rng: np.random.Generator) -> np.ndarray:
        n = len(self.scope(model))
        if n == 0:
            return np.zeros(0)
        if self.kind == "rlw":
            return sample_rlw(rng, n)
        return self.expected(model)

    def expected(self, model: HardSharedModel) -> np.ndarray:
        """Deterministic weights: the ELW vector, or the RLW expectation (uniform)."""
        n = len(self.scope(model))
        if self.kind == "elw" and self.elw_weights is not None:
            if len(self.elw_weights) != n:
                raise ConfigError(f"ELW weights have length {len(self.elw_weights)}, scope has {n} tasks")
            return np.asarray(self.elw_weights, dtype=np.float64)
        if self.kind == "elw" and not self.elw_normalized:
            return np.ones(n)
        return np.full(n, 1.0 / n) if n else np.zeros(0)


def task_weights(model: HardSharedModel, weights: np.ndarray, mode: str) -> dict:
    """Map a scope weight vector to an effective weight for every task."""
    if mode == FEDAUX:
        main = model.main_task
        if main is None:
            raise ConfigError("fedaux mode requires exactly one main task")
        aux = [t.id for t in model.aux_tasks]
        if len(weights) != len(aux):
            raise ConfigError(f"expected {len(aux)} auxiliary weights, got {len(weights)}")
        out = {main.id: 1.0}
        out.update({tid: float(w) for tid, w in zip(aux, weights)})
        return out
    if mode == MTDNN:
        if len(weights) != len(model.tasks):
            raise ConfigError(f"expected {len(model.tasks)} task weights, got {len(weights)}")
        return {tid: float(w) for tid, w in zip(model.task_ids, weights)}
    raise ConfigError(f"unknown loss mode {mode!r}")


def composite_loss(losses: Mapping[str, float], weights, mode: str, main: str | None = None, aux=None) -> float:
    """Combine per-task losses.

    fedaux: ``L_main + sum_b w_b * L_b`` over the auxiliary ids ``aux`` (in
    weight order). mtdnn: ``sum_i w_i * L_i`` over ``losses`` in insertion order.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if mode == FEDAUX:
        if main is None or main not in losses:
            raise ConfigError("fedaux loss needs the main-task loss")
        if aux is None:
            aux = [tid for tid in losses if tid != main]
        if len(aux) != len(weights):
            raise ConfigError(f"{len(aux)} auxiliary losses but {len(weights)} weights")
        total = float(losses[main])
        for tid, w in zip(aux, weights):
            total += w * losses[tid]
        return float(total)
    if mode == MTDNN:
        values = list(losses.values())
        if len(values) != len(weights):
            raise ConfigError(f"{len(values)} task losses but {len(weights)} weights")
        return float(sum(w * v for w, v in zip(weights, values)))
    raise ConfigError(f"unknown loss mode {mode!r}")


def mtl_loss_and_grad(model: HardSharedModel, params, x, labels: Mapping[str, np.ndarray], weights, mode):
    """Composite loss, per-task losses and the flat gradient for one batch."""
    sizes = {len(labels[tid]) for tid in model.task_ids}
    if len(sizes) != 1 or sizes.pop() != len(x):
        raise DataError("label arrays and inputs disagree on batch size")
    eff = task_weights(model, weights, mode)
    logits, cache = model.forward(params, x)
    per_task, dlogits = {}, {}
    total = 0.0
    for tid in model.task_ids:
        per_task[tid], d = softmax_cross_entropy(logits[tid], labels[tid])
        total += eff[tid] * per_task[tid]
        if eff[tid] != 0.0:
            dlogits[tid] = eff[tid] * d
    return total, per_task, model.backward(params, cache, dlogits)


def mtl_backward(model: HardSharedModel, params, x, labels, weights, mode) -> np.ndarray:
    return mtl_loss_and_grad(model, params, x, labels, weights, mode)[2]


@dataclass
class Shard:
    """Feature array plus one label array per task id."""

    x: np.ndarray
    labels: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.x)

    def take(self, idx):
        return Shard(self.x[idx], {k: v[idx] for k, v in self.labels.items()})


def local_iterations(n_samples: int, batch_size: int, epochs: int) -> int:
    return epochs * ceil(n_samples / batch_size)


def local_train(
    model: HardSharedModel,
    params: np.ndarray,
    shard: Shard,
    eta: float,
    batch_size: int,
    epochs: int,
    strategy: WeightingStrategy,
    rng: np.random.Generator,
):
    """Mini-batch SGD over a station's shard.

    The shard is reshuffled every epoch from ``rng``; RLW weights are drawn
    from the same stream. Returns ``(params, epoch_losses)`` where
    ``epoch_losses[task_id]`` lists the mean batch loss of each epoch.
    """
    n = len(shard)
    if n == 0:
        raise ConfigError("cannot train on an empty shard")
    if batch_size < 1 or epochs < 1:
        raise ConfigError("batch size and epochs must be >= 1")
    params = np.array(params, dtype=np.float64, copy=True)
    history = {tid: [] for tid in model.task_ids}
    weights = strategy.draw(model, rng) if strategy.resample == "round" else None
    for _ in range(epochs):
        order = rng.permutation(n)
        if strategy.resample == "epoch":
            weights = strategy.draw(model, rng)
        sums = dict.fromkeys(model.task_ids, 0.0)
        n_batches = 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if strategy.resample == "batch":
                weights = strategy.draw(model, rng)
            _, per_task, grads = mtl_loss_and_grad(
                model, params, shard.x[idx], {k: v[idx] for k, v in shard.labels.items()}, weights, strategy.mode
            )
            sgd_step(params, grads, eta, out=params)
            for tid, value in per_task.items():
                sums[tid] += value
            n_batches += 1
        for tid in model.task_ids:
            history[tid].append(sums[tid] / n_batches)
    return params, history
