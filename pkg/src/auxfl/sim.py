"""Edge-server / base-station federated training loop.

Every round: broadcast the global parameters to the roster, let the selected
participants train locally, collect their parameters and average them
weighted by shard size. Costs are booked into a :class:`CostLedger`.

Randomness is derived from ``(seed, purpose, station, round)`` so results do
not depend on the order in which stations are simulated.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .costs import CostLedger, DeviceProfile, shard_bits
from .errors import ConfigError, NumericalError
from .mtl import (
    AUXILIARY,
    FEDAUX,
    MAIN,
    MTDNN,
    HardSharedModel,
    Shard,
    TaskSpec,
    WeightingStrategy,
    composite_loss,
    local_iterations,
    local_train,
)
from .nn import Dense, LayerStack, layer_from_dict, softmax_cross_entropy

_INIT, _STATION, _SELECT = 0x1417, 0x57A7, 0xCA11

BASELINES = ("fedaux-rlw", "fedaux-elw", "mtdnn-rlw", "mtdnn-elw", "fedavg-single", "baseline-iid")


def init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _INIT]))


def station_rng(seed: int, station: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STATION, station, round_index]))


def selection_rng(seed: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _SELECT, round_index]))


@dataclass
class RoundConfig:
    rounds: int = 100
    eta: float = 0.005
    batch_size: int = 32
    epochs: int = 20
    participation: float = 1.0
    seed: int = 0
    record_wall_clock: bool = False

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if not 0 < self.participation <= 1:
            raise ConfigError("participation must lie in (0, 1]")
        if self.eta < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("need eta >= 0, batch_size >= 1, epochs >= 1")


@dataclass
class BaseStation:
    id: int
    shard: Shard
    profile: DeviceProfile
    params: np.ndarray | None = None

    @property
    def n_samples(self) -> int:
        return len(self.shard)


@dataclass
class EdgeServer:
    params: np.ndarray
    roster: list
    participation: float = 1.0
    round_index: int = 0


@dataclass
class RoundMetrics:
    round: int
    tasks: dict  # (task_id, split) -> (accuracy, loss)
    total_global_loss: float
    comm_bytes_cum: int
    energy_j_cum: float
    modeled_s_cum: float
    wall_ms: float | None = None


def broadcast(server: EdgeServer, stations: Sequence[BaseStation]) -> int:
    """Copy the global parameters to every roster station; returns the downlink count."""
    for u in server.roster:
        stations[u].params = server.params.copy()
    return len(server.roster)


def select_participants(rng: np.random.Generator, roster: Sequence[int], fraction: float) -> list:
    k = int(np.floor(fraction * len(roster) + 0.5))
    if k < 1:
        raise ConfigError(f"participation {fraction} selects no station out of {len(roster)}")
    if k >= len(roster):
        return list(roster)
    return sorted(int(u) for u in rng.choice(np.asarray(roster), size=k, replace=False))


def aggregate(updates) -> np.ndarray:
    """Shard-size-weighted mean of ``(n_samples, params)`` pairs.

    Computed as ``sum(n_u * params_u) / sum(n_u)`` in the given order, then
    clipped to the per-coordinate range of the inputs so that rounding never
    leaves their hull (identical inputs come back unchanged).
    """
    updates = list(updates)
    if not updates:
        raise ConfigError("nothing to aggregate")
    length = updates[0][1].shape
    total = 0
    acc = np.zeros(length)
    for n, p in updates:
        if p.shape != length:
            raise RuntimeError(f"parameter vector shape {p.shape} != {length}")
        if n < 1:
            raise ConfigError("every participant must hold at least one sample")
        acc += n * p
        total += n
    stacked = np.stack([p for _, p in updates])
    return np.clip(acc / total, stacked.min(axis=0), stacked.max(axis=0))


def evaluate(model: HardSharedModel, params: np.ndarray, shard: Shard, chunk: int = 4096) -> dict:
    """Per-task ``(accuracy, mean cross-entropy)`` on ``shard``."""
    n = len(shard)
    if n == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    correct = dict.fromkeys(model.task_ids, 0)
    loss = dict.fromkeys(model.task_ids, 0.0)
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        logits, _ = model.forward(params, shard.x[sl])
        for tid in model.task_ids:
            y = shard.labels[tid][sl]
            ce, _ = softmax_cross_entropy(logits[tid], y)
            loss[tid] += ce * len(y)
            correct[tid] += int((logits[tid].argmax(axis=1) == y).sum())
    return {tid: (correct[tid] / n, loss[tid] / n) for tid in model.task_ids}


def local_loss(model, params, shard: Shard, strategy: WeightingStrategy) -> float:
    """A station's composite loss over its whole shard, using the expected weights."""
    per_task = {tid: lv for tid, (_, lv) in evaluate(model, params, shard).items()}
    weights = strategy.expected(model)
    if strategy.mode == FEDAUX:
        return composite_loss(per_task, weights, FEDAUX, model.main_task.id, [t.id for t in model.aux_tasks])
    return composite_loss(per_task, weights, MTDNN)


def global_loss(sizes, losses) -> float:
    """Shard-size-weighted average of station losses."""
    sizes = list(sizes)
    return float(sum(n * l for n, l in zip(sizes, losses)) / sum(sizes))


def run_round(
    server: EdgeServer,
    stations: Sequence[BaseStation],
    model: HardSharedModel,
    config: RoundConfig,
    strategy: WeightingStrategy,
    ledger: CostLedger,
    eval_sets: dict,
) -> RoundMetrics:
    t = server.round_index
    tic = time.perf_counter()
    downlinks = broadcast(server, stations)
    participants = select_participants(selection_rng(config.seed, t), server.roster, server.participation)
    updates, work = [], {}
    for u in participants:
        st = stations[u]
        params, history = local_train(
            model, st.params, st.shard, config.eta, config.batch_size, config.epochs, strategy,
            station_rng(config.seed, u, t),
        )
        last = [h[-1] for h in history.values()]
        if not (np.all(np.isfinite(last)) and np.all(np.isfinite(params))):
            raise NumericalError(f"non-finite loss in round {t + 1} at station {u}", t + 1, u)
        st.params = params
        updates.append((st.n_samples, params))
        work[u] = (st.profile, local_iterations(st.n_samples, config.batch_size, config.epochs))
    server.params = aggregate(updates)
    server.round_index += 1

    tasks = {}
    for split_name, shard in eval_sets.items():
        for tid, pair in evaluate(model, server.params, shard).items():
            tasks[(tid, split_name)] = pair
    sizes = [stations[u].n_samples for u in server.roster]
    losses = [local_loss(model, server.params, stations[u].shard, strategy) for u in server.roster]
    gl = global_loss(sizes, losses)
    if not np.isfinite(gl):
        raise NumericalError(f"non-finite global loss in round {t + 1}", t + 1)
    wall = (time.perf_counter() - tic) * 1e3 if config.record_wall_clock else None
    ledger.record_round(t + 1, len(participants), downlinks, model.n_params, work, wall)
    _, comm, energy, modeled, _ = list(ledger.cumulative())[-1]
    return RoundMetrics(t + 1, tasks, gl, comm, energy, modeled, wall)


# -- model construction and experiment driver ------------------------------------------


def build_model(trunk_layers, head_layers, tasks: Sequence[TaskSpec], input_shape) -> HardSharedModel:
    """Trunk from layer dicts; each head is ``head_layers`` plus a final Dense to the task's classes."""
    trunk = LayerStack([layer_from_dict(d) for d in trunk_layers], input_shape)
    heads = {}
    for task in tasks:
        hidden = [layer_from_dict(d) for d in head_layers]
        probe = LayerStack(hidden, trunk.output_shape)
        if len(probe.output_shape) != 1:
            raise ConfigError(f"head layers must end in a flat vector, got {probe.output_shape}")
        heads[task.id] = LayerStack(hidden + [Dense(probe.output_shape[0], task.num_classes)], trunk.output_shape)
    return HardSharedModel(trunk, heads, tasks)


def parse_baseline(name: str):
    """Return ``(kind, single_task)`` for a baseline name such as ``fedavg-single:duration``."""
    kind, _, task = name.partition(":")
    if kind not in BASELINES:
        raise ConfigError(f"unknown baseline {name!r}; expected one of {', '.join(BASELINES)}")
    if task and kind != "fedavg-single":
        raise ConfigError(f"baseline {kind!r} takes no task suffix")
    return kind, task or None


def baseline_strategy(kind: str, resample: str = "batch", mtdnn_elw: str = "sum") -> WeightingStrategy:
    """Loss weighting for a baseline.

    ``mtdnn_elw="sum"`` trains MT-DNN-FL ELW on the unweighted sum of task
    losses; ``"mean"`` uses ``1/M`` per task.
    """
    if kind in ("fedaux-rlw", "baseline-iid"):
        return WeightingStrategy("rlw", FEDAUX, resample=resample)
    if kind == "fedaux-elw":
        return WeightingStrategy("elw", FEDAUX)
    if kind == "mtdnn-rlw":
        return WeightingStrategy("rlw", MTDNN, resample=resample)
    if kind == "mtdnn-elw":
        if mtdnn_elw not in ("sum", "mean"):
            raise ConfigError(f"mtdnn_elw must be 'sum' or 'mean', got {mtdnn_elw!r}")
        return WeightingStrategy("elw", MTDNN, elw_normalized=mtdnn_elw == "mean")
    return WeightingStrategy("elw", FEDAUX)


@dataclass
class Experiment:
    """Everything a run needs besides the baseline name."""

    trunk_layers: list
    head_layers: list
    tasks: list  # TaskSpec, main first
    input_shape: tuple
    train: object  # FlowDataset
    validation: object
    test: object
    shards: list  # index arrays into train (non-IID plan)
    iid_shards: list | None = None
    round_config: RoundConfig = field(default_factory=RoundConfig)
    profile: DeviceProfile = field(default_factory=DeviceProfile)
    bytes_per_param: int = 4
    mb_definition: float = 1e6
    resample: str = "batch"
    mtdnn_elw: str = "sum"


@dataclass
class ExperimentResult:
    baseline: str
    task_ids: list
    metrics: list
    ledger: CostLedger
    params: np.ndarray
    n_params: int


def run_experiment(exp: Experiment, baseline: str, sink: Callable | None = None) -> ExperimentResult:
    kind, single = parse_baseline(baseline)
    if kind == "fedavg-single":
        chosen = single or next(t.id for t in exp.tasks if t.role == MAIN)
        match = [t for t in exp.tasks if t.id == chosen]
        if not match:
            raise ConfigError(f"fedavg-single task {chosen!r} is not defined")
        tasks = [TaskSpec(chosen, MAIN, match[0].num_classes)]
    else:
        tasks = list(exp.tasks)
        if kind.startswith("fedaux") or kind == "baseline-iid":
            if sum(t.role == MAIN for t in tasks) != 1:
                raise ConfigError("fedaux baselines need exactly one main task")
    if kind == "baseline-iid":
        if exp.iid_shards is None:
            raise ConfigError("baseline-iid needs an IID partition")
        shard_idx = exp.iid_shards
    else:
        shard_idx = exp.shards
    model = build_model(exp.trunk_layers, exp.head_layers, tasks, exp.input_shape)
    strategy = baseline_strategy(kind, exp.resample, exp.mtdnn_elw)
    task_ids = [t.id for t in tasks]
    cfg = exp.round_config

    stations = []
    for u, idx in enumerate(shard_idx):
        if len(idx) == 0:
            raise ConfigError(f"station {u} has an empty shard")
        part = exp.train.subset(idx)
        bits = shard_bits(len(part), part.n_features, len(tasks))
        stations.append(BaseStation(u, part.shard(task_ids, exp.input_shape), exp.profile.with_bits(bits)))
    eval_sets = {}
    for name, ds in (("validation", exp.validation), ("test", exp.test)):
        if ds is not None and len(ds):
            eval_sets[name] = ds.shard(task_ids, exp.input_shape)

    server = EdgeServer(model.init_params(init_rng(cfg.seed)), list(range(len(stations))), cfg.participation)
    ledger = CostLedger(len(stations), exp.bytes_per_param, exp.mb_definition)
    metrics = []
    for _ in range(cfg.rounds):
        m = run_round(server, stations, model, cfg, strategy, ledger, eval_sets)
        metrics.append(m)
        if sink is not None:
            sink(m)
    return ExperimentResult(baseline, task_ids, metrics, ledger, server.params, model.n_params)


__all__ = [
    "AUXILIARY",
    "BASELINES",
    "BaseStation",
    "EdgeServer",
    "Experiment",
    "ExperimentResult",
    "RoundConfig",
    "RoundMetrics",
    "aggregate",
    "broadcast",
    "build_model",
    "evaluate",
    "global_loss",
    "local_loss",
    "parse_baseline",
    "run_experiment",
    "run_round",
    "select_participants",
    "station_rng",
]
