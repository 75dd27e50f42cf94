"""Server round loop and the per-client procedures of each protocol.

Four protocols share one round structure (sample, local step, aggregate,
account bytes) and differ in their local step and their downlink:

* ``cell``: one dense broadcast of the global model. A client whose
  validation accuracy on that model beats its personal threshold prunes it
  by magnitude and retrains the survivors from their initial values;
  otherwise it trains the broadcast model densely and lowers its threshold.
* ``lotteryfl``: each participant is sent the global values of its own
  subnetwork (unicast). Clients above a fixed threshold prune further inside
  their mask and retrain from the initial values.
* ``fedavg``: dense broadcast, dense training, dense upload.
* ``standalone``: local training only; nothing is transmitted.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .comms import CommLedger, PayloadDescriptor, record_round
from .config import ExperimentConfig
from .data import DatasetSource, UserSplit, load_cifar10, make_synthetic, partition
from .errors import ConfigurationError, UsageError
from .nn import FlatModel, evaluate_accuracy, init_model, train_local
from .pruning import (
    BinaryMask,
    PruneSchedule,
    advance_rate,
    apply_mask,
    magnitude_prune,
    reinitialize,
)
from .seeding import SeedStreams

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class UserState:
    user_id: int
    split: UserSplit
    schedule: PruneSchedule
    default_threshold: float
    mask: BinaryMask
    model: FlatModel
    failures: int = 0  # consecutive validation failures since the last restore
    decay: float = 0.9

    @property
    def threshold(self) -> float:
        # recomputed from the failure count so the decay is exactly default * decay**f
        return self.default_threshold * self.decay**self.failures

    def decay_threshold(self) -> None:
        self.failures += 1

    def restore_threshold(self) -> None:
        self.failures = 0

    @property
    def num_samples(self) -> int:
        return self.split.n_train


def new_user(user_id: int, split: UserSplit, initial: FlatModel, cfg: ExperimentConfig) -> UserState:
    return UserState(
        user_id=user_id,
        split=split,
        schedule=PruneSchedule(cfg.prune_step, cfg.prune_target),
        default_threshold=cfg.threshold_default,
        mask=BinaryMask.ones(initial.spec.weight_count),
        model=initial.copy(),
        decay=cfg.threshold_decay,
    )


@dataclass(eq=False)
class RoundUpdate:
    """One client's upload. ``mask`` is None for a dense upload."""

    user_id: int
    model: FlatModel
    num_samples: int
    mask: BinaryMask | None = None
    pruned_this_round: bool = False
    passed_validation: bool | None = None

    def __post_init__(self) -> None:
        if self.num_samples < 1:
            raise UsageError(f"user {self.user_id}: sample count must be >= 1")

    @property
    def sparse(self) -> bool:
        return self.mask is not None

    def kept_values(self) -> np.ndarray:
        if self.mask is None:
            return self.model.weights.copy()
        return self.model.weights[self.mask.bits]

    @property
    def payload(self) -> PayloadDescriptor:
        spec = self.model.spec
        if self.mask is None:
            return PayloadDescriptor.dense(spec.weight_count, spec.bias_count)
        return PayloadDescriptor.sparse(spec.weight_count, self.mask.kept_count, spec.bias_count)


@dataclass(eq=False)
class GlobalState:
    model: FlatModel
    init_model: FlatModel
    round: int
    protocol: str


def sample_participants(C: float, K: int, rng: np.random.Generator) -> list[int]:
    """``max(floor(C*K), 1)`` distinct user ids, uniformly, in ascending order."""
    if K < 1:
        raise UsageError(f"need at least one user, got K={K}")
    if not 0.0 <= C <= 1.0:
        raise UsageError(f"C must lie in [0, 1], got {C}")
    p = max(math.floor(C * K + 1e-9), 1)
    return sorted(int(k) for k in rng.choice(K, size=min(p, K), replace=False))


def _train(state: UserState, start: FlatModel, mask, cfg: ExperimentConfig, rng) -> FlatModel:
    return train_local(
        start, mask, state.split.train, cfg.local_epochs, cfg.batch_size, cfg.lr, rng
    )


def cell_local_step(
    state: UserState,
    global_model: FlatModel,
    initial: FlatModel,
    cfg: ExperimentConfig,
    rng: np.random.Generator,
) -> RoundUpdate:
    """Validate the broadcast model, then either search for a ticket or train densely.

    The rate advances before the threshold test, so a client that fails
    validation still moves one step toward the target unless
    ``cfg.defer_rate_on_failure`` is set. At the target rate every round
    prunes the broadcast model to the target and keeps training the surviving
    global values, without consulting the threshold (``cfg.rewind_at_target``
    rewinds them to the initial weights instead).
    """
    d = global_model.spec.weight_count
    sched = state.schedule
    passed = None
    if sched.rate < sched.target:
        val_acc = evaluate_accuracy(global_model, state.split.validation)
        passed = val_acc > state.threshold
        if passed or not cfg.defer_rate_on_failure:
            advance_rate(sched)
        if passed:
            mask = magnitude_prune(global_model, sched.rate, scope=cfg.prune_scope)
            start = reinitialize(mask, initial)
            state.restore_threshold()
        else:
            state.decay_threshold()
            mask = BinaryMask.ones(d)
            start = global_model.copy()
        pruned = passed
    else:
        mask = magnitude_prune(global_model, sched.target, scope=cfg.prune_scope)
        start = reinitialize(mask, initial) if cfg.rewind_at_target else apply_mask(global_model, mask)
        pruned = True
    state.mask = mask
    state.model = _train(state, start, mask, cfg, rng)
    return RoundUpdate(
        user_id=state.user_id,
        model=state.model.copy(),
        num_samples=state.num_samples,
        mask=mask.copy() if pruned else None,
        pruned_this_round=pruned,
        passed_validation=passed,
    )


def lotteryfl_downlink(global_model: FlatModel, mask: BinaryMask) -> FlatModel:
    """The global values of one client's subnetwork; zeros elsewhere."""
    return FlatModel(global_model.spec, global_model.weights * mask.bits, global_model.biases.copy())


def lotteryfl_local_step(
    state: UserState,
    downlink: FlatModel,
    initial: FlatModel,
    cfg: ExperimentConfig,
    rng: np.random.Generator,
) -> RoundUpdate:
    """Merge the unicast subnetwork into the local model and prune deeper if it validates.

    Pruning only ever removes weights from the client's existing mask, so
    successive masks are nested.
    """
    if np.any(downlink.weights[~state.mask.bits] != 0.0):
        raise ConfigurationError(f"user {state.user_id}: downlink carries values outside its mask")
    merged = state.model.weights.copy()
    merged[state.mask.bits] = downlink.weights[state.mask.bits]
    model = FlatModel(downlink.spec, merged, downlink.biases.copy())

    sched = state.schedule
    val_acc = evaluate_accuracy(model, state.split.validation)
    passed = val_acc > state.default_threshold
    pruned = False
    if passed and sched.rate < sched.target:
        advance_rate(sched)
        state.mask = magnitude_prune(
            model, sched.rate, within=state.mask, scope=cfg.prune_scope
        )
        model = reinitialize(state.mask, initial)
        pruned = True
    state.model = _train(state, model, state.mask, cfg, rng)
    return RoundUpdate(
        user_id=state.user_id,
        model=state.model.copy(),
        num_samples=state.num_samples,
        mask=state.mask.copy(),
        pruned_this_round=pruned,
        passed_validation=passed,
    )


def fedavg_local_step(
    state: UserState, global_model: FlatModel, cfg: ExperimentConfig, rng: np.random.Generator
) -> RoundUpdate:
    state.model = _train(state, global_model, state.mask, cfg, rng)
    return RoundUpdate(state.user_id, state.model.copy(), state.num_samples)


def standalone_local_step(
    state: UserState, cfg: ExperimentConfig, rng: np.random.Generator
) -> RoundUpdate:
    state.model = _train(state, state.model, state.mask, cfg, rng)
    return RoundUpdate(state.user_id, state.model.copy(), state.num_samples)


def federated_average(
    updates: list[RoundUpdate], prev_global: FlatModel, mode: str = "zeros"
) -> FlatModel:
    """Sample-count weighted mean of the uploaded models.

    ``zeros``: pruned coordinates of sparse uploads enter the mean as zeros.
    ``mask_normalized``: each weight is averaged only over the uploads that
    keep it (weights kept by nobody retain their previous global value).
    Biases are always a plain weighted mean. Summation runs in user-id order.
    """
    if not updates:
        raise UsageError("cannot aggregate an empty list of updates")
    if mode not in ("zeros", "mask_normalized"):
        raise UsageError(f"unknown aggregation mode {mode!r}")
    spec = prev_global.spec
    ordered = sorted(updates, key=lambda u: u.user_id)
    n = sum(u.num_samples for u in ordered)
    weights = np.zeros(spec.weight_count)
    biases = np.zeros(spec.bias_count)
    for u in ordered:
        if u.model.spec != spec:
            raise ConfigurationError(f"user {u.user_id} uploaded a model of another shape")
        share = u.num_samples / n
        w = u.model.weights if u.mask is None else u.model.weights * u.mask.bits
        if mode == "zeros":
            weights += share * w
        biases += share * u.model.biases
    if mode == "mask_normalized":
        coverage = np.zeros(spec.weight_count)
        for u in ordered:
            bits = np.ones(spec.weight_count) if u.mask is None else u.mask.bits
            w = u.model.weights * bits
            weights += u.num_samples * w
            coverage += u.num_samples * bits
        held = coverage > 0
        weights = np.where(held, weights / np.where(held, coverage, 1.0), prev_global.weights)
    return FlatModel(spec, weights, biases)


@dataclass
class RoundMetrics:
    round: int
    participants: list[int]
    user_accuracies: list[float]
    ul_bytes: int
    dl_bytes: int
    cum_bytes: int
    sparsity_mean: float
    pruners: int

    @property
    def acc_mean(self) -> float:
        return float(np.mean(self.user_accuracies))


@dataclass
class MetricsTable:
    protocol: str
    rows: list[RoundMetrics] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1].acc_mean if self.rows else float("nan")


def personal_accuracy(protocol: str, state: UserState, global_model: FlatModel) -> float:
    # FedAvg has no personal model: every user deploys the global one
    model = global_model if protocol == "fedavg" else state.model
    return evaluate_accuracy(model, state.split.test)


def run_round(
    g: GlobalState,
    users: list[UserState],
    cfg: ExperimentConfig,
    ledger: CommLedger,
    streams: SeedStreams,
) -> tuple[GlobalState, RoundMetrics]:
    t = g.round + 1
    protocol = g.protocol
    spec = g.model.spec
    d, nb = spec.weight_count, spec.bias_count
    participants = sample_participants(cfg.C, len(users), streams.participants(t))

    updates: list[RoundUpdate] = []
    downlinks: list[PayloadDescriptor] = []
    if protocol in ("cell", "fedavg"):
        downlinks.append(PayloadDescriptor.dense(d, nb))
    for k in participants:
        state = users[k]
        rng = streams.training(t, k)
        if protocol == "cell":
            updates.append(cell_local_step(state, g.model, g.init_model, cfg, rng))
        elif protocol == "lotteryfl":
            downlinks.append(PayloadDescriptor.sparse(d, state.mask.kept_count, nb))
            down = lotteryfl_downlink(g.model, state.mask)
            updates.append(lotteryfl_local_step(state, down, g.init_model, cfg, rng))
        elif protocol == "fedavg":
            updates.append(fedavg_local_step(state, g.model, cfg, rng))
        elif protocol == "standalone":
            updates.append(standalone_local_step(state, cfg, rng))
        else:
            raise UsageError(f"unknown protocol {protocol!r}")

    if protocol == "standalone":
        new_global = g.model
        row = ledger.record_idle(t)
    else:
        new_global = federated_average(updates, g.model, cfg.aggregation)
        record_round(ledger, t, [u.payload for u in updates], downlinks)
        row = ledger.rows[-1]

    accs = [personal_accuracy(protocol, u, new_global) for u in users]
    sparsity = float(np.mean([u.mask.sparsity() for u in users]))
    metrics = RoundMetrics(
        round=t,
        participants=participants,
        user_accuracies=accs,
        ul_bytes=row.ul_bytes,
        dl_bytes=row.dl_bytes,
        cum_bytes=row.cum_bytes,
        sparsity_mean=sparsity,
        pruners=sum(u.pruned_this_round for u in updates),
    )
    logger.debug(
        "%s round %d: acc=%.4f ul=%d dl=%d pruners=%d",
        protocol, t, metrics.acc_mean, row.ul_bytes, row.dl_bytes, metrics.pruners,
    )
    return GlobalState(new_global, g.init_model, t, protocol), metrics


@dataclass(eq=False)
class ExperimentResult:
    config: ExperimentConfig
    metrics: MetricsTable
    ledger: CommLedger
    global_state: GlobalState
    users: list[UserState]


def load_dataset(cfg: ExperimentConfig, streams: SeedStreams) -> DatasetSource:
    ds = cfg.dataset
    if ds.kind == "cifar10":
        return load_cifar10(ds.path)
    return make_synthetic(
        ds.num_classes, ds.dim, ds.per_class_train, ds.per_class_test, ds.cluster_sep,
        streams.dataset(),
    )


def setup(cfg: ExperimentConfig, source: DatasetSource | None = None):
    """Build the user states and the initial global model for ``cfg``."""
    cfg.validate()
    streams = SeedStreams(cfg.seed)
    if source is None:
        source = load_dataset(cfg, streams)
    splits = partition(
        source, cfg.num_users, cfg.labels_per_user, cfg.samples_per_user, cfg.val_fraction,
        streams.partition(),
    )
    spec = cfg.model.build(source.sample_shape, source.num_classes)
    initial = init_model(spec, streams.init())
    users = [new_user(k, split, initial, cfg) for k, split in enumerate(splits)]
    g = GlobalState(initial.copy(), initial, 0, cfg.protocol)
    return g, users, streams


def run_experiment(
    cfg: ExperimentConfig, source: DatasetSource | None = None
) -> ExperimentResult:
    """Run ``cfg.rounds`` rounds and collect per-round metrics and the ledger.

    ``source`` lets callers reuse an already loaded dataset; otherwise it is
    built from ``cfg.dataset``.
    """
    g, users, streams = setup(cfg, source)
    ledger = CommLedger(cfg.protocol)
    table = MetricsTable(cfg.protocol)
    for _ in range(cfg.rounds):
        g, row = run_round(g, users, cfg, ledger, streams)
        table.rows.append(row)
    return ExperimentResult(cfg, table, ledger, g, users)
