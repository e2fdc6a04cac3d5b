"""Round state machine: local training, queued aggregation, run loops.

Three regimes share one engine. `fl_only` is the plain federated loop:
deploy the global model, train the selected clients locally, enqueue
their updates, aggregate whenever the server queue reaches its
threshold. `ffm` prepends a server-side optimization phase on the
public shard to every round. `centralized` trains on the public shard
only, evaluated on the same cadence as federated rounds so histories
line up.

Client updates carry the parameter delta plus its exact subtraction
round-off; aggregation accumulates weighted deltas in double-double and
rounds once. This keeps the update equation's identities exact in
floating point: one client at server step 1.0 reproduces that client's
trained model bit-for-bit, and all-zero deltas leave the global model
untouched.

Divergence is an outcome, not a crash: when training or aggregation
produces non-finite parameters, the run is recorded as diverged at the
offending round and client and the history returned as-is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import PartitionPlan, Shard
from .models import Batch, ModelSpec, init_params, scores, sgd_epoch
from .numerics import dd_add, dd_round, dd_scale, two_diff, two_prod
from .params import NonFiniteParameterError, ParameterVector
from .seeding import derive_seed
from .simnet import LatencyModel, Network, comm_totals, model_payload_bytes


class FederationError(ValueError):
    """Raised for invalid configurations and malformed updates."""


MODES = ("centralized", "fl_only", "ffm")
WEIGHTINGS = ("normalized", "raw")


@dataclass(frozen=True)
class ClientUpdate:
    """One client's round result: delta against the deployed global model.

    `delta_residual` is the exact round-off of the float64 subtraction
    that produced `delta`; together they encode the trained parameters
    relative to the deployed model with no information loss.
    """

    client_id: int
    delta: ParameterVector
    n_k: int
    round_index: int
    delta_residual: np.ndarray

    def __post_init__(self):
        if self.n_k < 1:
            raise FederationError(f"n_k must be >= 1, got {self.n_k}")
        if self.round_index < 1:
            raise FederationError(f"round must be >= 1, got {self.round_index}")
        residual = np.asarray(self.delta_residual, dtype=np.float64)
        if residual.shape != (len(self.delta),):
            raise FederationError("delta_residual must match the delta layout")
        object.__setattr__(self, "delta_residual", residual)


@dataclass(frozen=True)
class Pending:
    size: int


@dataclass(frozen=True)
class Flush:
    updates: tuple[ClientUpdate, ...]


@dataclass
class UpdateQueue:
    """Server-side queue that flushes exactly at the threshold tau."""

    tau: int
    items: list[ClientUpdate] = field(default_factory=list)

    def __post_init__(self):
        if self.tau < 1:
            raise FederationError(f"tau must be >= 1, got {self.tau}")

    def enqueue(self, update: ClientUpdate) -> Pending | Flush:
        self.items.append(update)
        if len(self.items) < self.tau:
            return Pending(len(self.items))
        flushed = tuple(self.items)
        self.items.clear()
        return Flush(flushed)


@dataclass(frozen=True)
class FedConfig:
    mode: str
    rounds: int = 10
    local_epochs: int = 1
    local_lr: float = 0.1
    batch_size: int = 32
    server_lr: float | tuple[float, ...] = 1.0
    participation_fraction: float = 1.0
    tau: int | None = None
    server_epochs: int = 1
    asynchronous: bool = False
    weighting: str = "normalized"
    public_first_round_only: bool = False
    central_epoch_budget: int | None = None
    deploy_fraction: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise FederationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.rounds < 0:
            raise FederationError(f"rounds must be >= 0, got {self.rounds}")
        if self.local_epochs < 1:
            raise FederationError(
                f"local_epochs must be >= 1, got {self.local_epochs}"
            )
        if self.local_lr <= 0:
            raise FederationError(f"local_lr must be > 0, got {self.local_lr}")
        if self.batch_size < 1:
            raise FederationError(f"batch_size must be >= 1, got {self.batch_size}")
        etas = (
            self.server_lr if isinstance(self.server_lr, tuple) else (self.server_lr,)
        )
        if not etas or any(e <= 0 for e in etas):
            raise FederationError(f"server_lr values must be > 0, got {self.server_lr}")
        if isinstance(self.server_lr, tuple) and len(self.server_lr) < self.rounds:
            raise FederationError(
                f"server_lr schedule has {len(self.server_lr)} entries "
                f"for {self.rounds} rounds"
            )
        for name in ("participation_fraction", "deploy_fraction"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise FederationError(f"{name} must be in (0, 1], got {value}")
        if self.tau is not None and self.tau < 1:
            raise FederationError(f"tau must be >= 1, got {self.tau}")
        if self.server_epochs < 0:
            raise FederationError(
                f"server_epochs must be >= 0, got {self.server_epochs}"
            )
        if self.central_epoch_budget is not None and self.central_epoch_budget < 0:
            raise FederationError(
                f"central_epoch_budget must be >= 0, got {self.central_epoch_budget}"
            )
        if self.weighting not in WEIGHTINGS:
            raise FederationError(
                f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}"
            )

    def eta(self, round_index: int) -> float:
        if isinstance(self.server_lr, tuple):
            return self.server_lr[round_index - 1]
        return self.server_lr


@dataclass(frozen=True)
class EvalMetrics:
    accuracy: float
    loss: float


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    params_hash: str
    train_loss: float
    test_accuracy: float
    test_loss: float
    participants: tuple[int, ...]
    n_flushes: int
    messages: int
    bytes: int
    diverged: bool = False


@dataclass
class RoundHistory:
    mode: str
    initial_hash: str
    initial_accuracy: float
    initial_loss: float
    records: list[RoundRecord]
    final_params: ParameterVector
    trace: list
    diverged: bool = False
    divergence_note: str | None = None

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].test_accuracy if self.records else self.initial_accuracy

    @property
    def final_loss(self) -> float:
        return self.records[-1].test_loss if self.records else self.initial_loss


def _as_batch(data) -> Batch:
    """Accept a Batch or anything shard-like exposing .batch()."""
    if isinstance(data, Batch):
        return data
    if hasattr(data, "batch"):
        return data.batch()
    raise FederationError(
        f"expected a Batch or a shard, got {type(data).__name__}"
    )


def evaluate(spec: ModelSpec, params: ParameterVector, data) -> EvalMetrics:
    """Accuracy of argmax predictions plus mean cross-entropy."""
    data = _as_batch(data)
    s = scores(spec, params, data.features)
    predictions = np.argmax(s, axis=1)
    accuracy = float(np.mean(predictions == data.labels))
    m = s.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(s - m).sum(axis=1))
    loss = float(np.mean(lse - s[np.arange(s.shape[0]), data.labels]))
    return EvalMetrics(accuracy=accuracy, loss=loss)


def local_train(global_params: ParameterVector, spec: ModelSpec, data,
                epochs: int, lr: float, batch_size: int, seed: int,
                client_id: int = 0, round_index: int = 1) -> ClientUpdate:
    """Run E epochs of SGD from the deployed model; return the delta.

    `data` is the client's shard (or an already-built Batch). The
    deployed parameters are not modified. Epoch e shuffles with the
    stream (seed, "epoch", e), matching `central_optimize`, so a
    centralized run with the same streams walks the same trajectory.
    """
    if epochs < 1:
        raise FederationError(f"epochs must be >= 1, got {epochs}")
    data = _as_batch(data)
    w = global_params
    if lr != 0.0:  # lr=0 is a valid no-op round; sgd_epoch itself requires lr > 0
        for e in range(epochs):
            w = sgd_epoch(spec, w, data, lr, batch_size, derive_seed(seed, "epoch", e))
    hi, lo = two_diff(w.values, global_params.values)
    return ClientUpdate(
        client_id=client_id,
        delta=ParameterVector(hi, global_params.layout),
        n_k=len(data),
        round_index=round_index,
        delta_residual=lo,
    )


def select_clients(client_ids: Sequence[int], fraction: float, round_index: int,
                   seed: int) -> list[int]:
    """ceil(fraction * n) ids, uniform without replacement, sorted."""
    ids = list(client_ids)
    if not ids:
        raise FederationError("cannot select from an empty client list")
    if not 0 < fraction <= 1:
        raise FederationError(f"fraction must be in (0, 1], got {fraction}")
    count = math.ceil(fraction * len(ids))
    rng = np.random.default_rng(derive_seed(seed, "select", round_index))
    chosen = rng.choice(len(ids), size=count, replace=False)
    return sorted(ids[i] for i in chosen)


def aggregate(w_prev: ParameterVector, updates: Sequence[ClientUpdate],
              eta: float, weighting: str = "normalized") -> ParameterVector:
    """Apply the weighted update sum: w + eta * sum_k weight_k * delta_k.

    Normalized weighting uses n_k / sum(n_j) (so eta is a pure server
    step size and eta=1 recovers classic sample-weighted averaging); raw
    weighting uses n_k as-is. Updates are summed in ascending
    (client_id, round) order regardless of list order, in double-double
    arithmetic with a single final rounding per coordinate.
    """
    if not updates:
        raise FederationError("aggregate requires at least one update")
    if weighting not in WEIGHTINGS:
        raise FederationError(f"unknown weighting {weighting!r}")
    for u in updates:
        if u.delta.layout != w_prev.layout:
            raise FederationError(
                f"update from client {u.client_id} has layout "
                f"{u.delta.layout.names()}, expected {w_prev.layout.names()}"
            )
    ordered = sorted(updates, key=lambda u: (u.client_id, u.round_index))
    n_total = sum(u.n_k for u in ordered)
    acc_hi = np.zeros(len(w_prev))
    acc_lo = np.zeros(len(w_prev))
    for u in ordered:
        weight = u.n_k / n_total if weighting == "normalized" else float(u.n_k)
        p_hi, p_lo = two_prod(u.delta.values, weight)
        p_lo = p_lo + u.delta_residual * weight
        acc_hi, acc_lo = dd_add(acc_hi, acc_lo, p_hi, p_lo)
    s_hi, s_lo = dd_scale(acc_hi, acc_lo, eta)
    return w_prev.with_values(dd_round(w_prev.values, s_hi, s_lo))


def central_optimize(params: ParameterVector, spec: ModelSpec,
                     public, epochs: int, lr: float,
                     batch_size: int, seed: int) -> ParameterVector:
    """Server-side SGD on the public shard; identity when there is none."""
    if epochs < 0:
        raise FederationError(f"epochs must be >= 0, got {epochs}")
    if epochs == 0 or public is None or len(public) == 0:
        return params
    public = _as_batch(public)
    w = params
    for e in range(epochs):
        w = sgd_epoch(spec, w, public, lr, batch_size, derive_seed(seed, "epoch", e))
    return w


ShardSchedule = Callable[[int, int], Batch]


def _constant_schedule(plan: PartitionPlan) -> ShardSchedule:
    batches = {k: shard.batch() for k, shard in enumerate(plan.private)}

    def schedule(round_index: int, client_id: int) -> Batch:
        return batches[client_id]

    return schedule


def _client_node(client_id: int) -> str:
    return f"c{client_id}"


def _build_network(config: FedConfig, n_clients: int, seed: int,
                   latency: LatencyModel | None) -> Network:
    nodes = ["server"] + [_client_node(k) for k in range(n_clients)]
    if not config.asynchronous:
        model = LatencyModel.zero(nodes, seed=derive_seed(seed, "latency"))
    elif latency is None:
        model = LatencyModel.uniform(
            nodes, base=1.0, jitter=0.0, seed=derive_seed(seed, "latency")
        )
    else:
        missing = set(nodes) - set(latency.base)
        if missing:
            raise FederationError(f"latency model missing nodes {sorted(missing)}")
        model = latency
    return Network(latency=model)


def _check_run_setup(config: FedConfig, plan: PartitionPlan) -> tuple[int, int]:
    n_clients = plan.n_clients
    if n_clients < 1:
        raise FederationError("partition plan has no private shards")
    deploy_count = math.ceil(config.deploy_fraction * n_clients)
    report_count = math.ceil(config.participation_fraction * deploy_count)
    tau = config.tau if config.tau is not None else report_count
    if tau > n_clients:
        raise FederationError(
            f"tau={tau} exceeds the number of clients ({n_clients})"
        )
    if tau > report_count:
        raise FederationError(
            f"tau={tau} exceeds the {report_count} updates arriving per round"
        )
    for k, shard in enumerate(plan.private):
        if len(shard) == 0:
            raise FederationError(f"private shard of client {k} is empty")
    return tau, report_count


def _train_pool(plan: PartitionPlan, mode: str) -> Batch:
    if mode == "centralized":
        return plan.public.batch()
    shards = [s for s in plan.private if len(s)]
    if mode == "ffm" and len(plan.public):
        shards = [plan.public] + shards
    ds = plan.private[0].dataset
    idx = np.sort(np.concatenate([s.indices for s in shards]))
    return Shard(ds, idx).batch()


def _federated_run(config: FedConfig, plan: PartitionPlan, spec: ModelSpec,
                   test: Shard, seed: int, use_public: bool,
                   latency: LatencyModel | None,
                   shard_schedule: ShardSchedule | None) -> RoundHistory:
    tau, _ = _check_run_setup(config, plan)
    test_batch = test.batch()
    pool = _train_pool(plan, "ffm" if use_public else "fl_only")
    public_batch = plan.public.batch() if len(plan.public) else None
    schedule = shard_schedule or _constant_schedule(plan)
    net = _build_network(config, plan.n_clients, seed, latency)
    queue = UpdateQueue(tau)

    w = init_params(spec, derive_seed(seed, "init"))
    payload = model_payload_bytes(len(w))
    initial = evaluate(spec, w, test_batch)
    history = RoundHistory(
        mode=config.mode,
        initial_hash=w.content_hash(),
        initial_accuracy=initial.accuracy,
        initial_loss=initial.loss,
        records=[],
        final_params=w,
        trace=net.trace,
    )
    all_ids = list(range(plan.n_clients))

    for t in range(1, config.rounds + 1):
        trace_mark = len(net.trace)
        if (
            use_public
            and public_batch is not None
            and config.server_epochs > 0
            and (not config.public_first_round_only or t == 1)
        ):
            try:
                w = central_optimize(
                    w, spec, public_batch, config.server_epochs, config.local_lr,
                    config.batch_size, derive_seed(seed, "central", t),
                )
            except NonFiniteParameterError as exc:
                _mark_diverged(history, w, f"server phase diverged in round {t}: {exc}")
                return history

        round_start = net.now
        deploy_ids = (
            all_ids
            if config.deploy_fraction == 1.0
            else select_clients(
                all_ids, config.deploy_fraction, t, derive_seed(seed, "deploy")
            )
        )
        delivered_at: dict[str, float] = {}
        for k in deploy_ids:
            net.send("server", _client_node(k), "model_deploy", payload,
                     now=round_start)
        for event in net.drain():
            delivered_at[event.dst] = event.deliver_at

        participants = select_clients(
            deploy_ids, config.participation_fraction, t,
            derive_seed(seed, "participation"),
        )
        updates: dict[str, ClientUpdate] = {}
        diverged_client: tuple[int, str] | None = None
        for k in participants:
            data_k = schedule(t, k)
            try:
                update = local_train(
                    w, spec, data_k, config.local_epochs, config.local_lr,
                    config.batch_size, derive_seed(seed, "local", t, k),
                    client_id=k, round_index=t,
                )
            except NonFiniteParameterError as exc:
                diverged_client = (k, str(exc))
                break
            node = _client_node(k)
            updates[node] = update
            net.send(node, "server", "model_update", payload,
                     now=delivered_at[node])
        if diverged_client is not None:
            k, detail = diverged_client
            _mark_diverged(
                history, w, f"client {k} diverged in round {t}: {detail}"
            )
            return history

        n_flushes = 0
        eta = config.eta(t)
        try:
            for event in net.drain():
                result = queue.enqueue(updates[event.src])
                if isinstance(result, Flush):
                    w = aggregate(w, result.updates, eta, config.weighting)
                    n_flushes += 1
        except NonFiniteParameterError as exc:
            _mark_diverged(history, w, f"aggregation diverged in round {t}: {exc}")
            return history

        round_trace = net.trace[trace_mark:]
        totals = comm_totals(round_trace, len(w))
        test_metrics = evaluate(spec, w, test_batch)
        train_loss = evaluate(spec, w, pool).loss
        record = RoundRecord(
            round_index=t,
            params_hash=w.content_hash(),
            train_loss=train_loss,
            test_accuracy=test_metrics.accuracy,
            test_loss=test_metrics.loss,
            participants=tuple(participants),
            n_flushes=n_flushes,
            messages=totals["messages"],
            bytes=totals["bytes"],
            diverged=not (
                math.isfinite(train_loss) and math.isfinite(test_metrics.loss)
            ),
        )
        history.records.append(record)
        history.final_params = w
        if record.diverged:
            history.diverged = True
            history.divergence_note = f"non-finite loss in round {t}"
    return history


def _mark_diverged(history: RoundHistory, w: ParameterVector, note: str) -> None:
    history.diverged = True
    history.divergence_note = note
    history.final_params = w


def run_fedavg(config: FedConfig, plan: PartitionPlan, spec: ModelSpec,
               test: Shard, seed: int,
               latency: LatencyModel | None = None,
               shard_schedule: ShardSchedule | None = None) -> RoundHistory:
    """Federated-only baseline; the public shard is never touched."""
    if config.mode != "fl_only":
        raise FederationError(f"run_fedavg requires mode 'fl_only', got {config.mode!r}")
    return _federated_run(
        config, plan, spec, test, seed, use_public=False,
        latency=latency, shard_schedule=shard_schedule,
    )


def run_ffm(config: FedConfig, plan: PartitionPlan, spec: ModelSpec,
            test: Shard, seed: int,
            latency: LatencyModel | None = None,
            shard_schedule: ShardSchedule | None = None) -> RoundHistory:
    """Federated rounds with a public-data server phase at each round start."""
    if config.mode != "ffm":
        raise FederationError(f"run_ffm requires mode 'ffm', got {config.mode!r}")
    return _federated_run(
        config, plan, spec, test, seed, use_public=True,
        latency=latency, shard_schedule=shard_schedule,
    )


def run_centralized(config: FedConfig, plan: PartitionPlan, spec: ModelSpec,
                    test: Shard, seed: int) -> RoundHistory:
    """Public-data-only training, evaluated once per server_epochs block.

    The epoch budget defaults to rounds * server_epochs so the compute
    envelope matches a federated run's server phases; private shards are
    never read.
    """
    if config.mode != "centralized":
        raise FederationError(
            f"run_centralized requires mode 'centralized', got {config.mode!r}"
        )
    if len(plan.public) == 0:
        raise FederationError("centralized mode requires a non-empty public shard")
    budget = (
        config.central_epoch_budget
        if config.central_epoch_budget is not None
        else config.rounds * config.server_epochs
    )
    if budget > 0 and config.server_epochs == 0:
        raise FederationError(
            "server_epochs must be >= 1 to spend a centralized epoch budget"
        )
    public_batch = plan.public.batch()
    test_batch = test.batch()
    w = init_params(spec, derive_seed(seed, "init"))
    initial = evaluate(spec, w, test_batch)
    history = RoundHistory(
        mode=config.mode,
        initial_hash=w.content_hash(),
        initial_accuracy=initial.accuracy,
        initial_loss=initial.loss,
        records=[],
        final_params=w,
        trace=[],
    )
    remaining = budget
    t = 0
    while remaining > 0:
        t += 1
        block = min(config.server_epochs, remaining)
        remaining -= block
        try:
            w = central_optimize(
                w, spec, public_batch, block, config.local_lr,
                config.batch_size, derive_seed(seed, "central", t),
            )
        except NonFiniteParameterError as exc:
            _mark_diverged(history, w, f"server phase diverged in round {t}: {exc}")
            return history
        test_metrics = evaluate(spec, w, test_batch)
        train_loss = evaluate(spec, w, public_batch).loss
        record = RoundRecord(
            round_index=t,
            params_hash=w.content_hash(),
            train_loss=train_loss,
            test_accuracy=test_metrics.accuracy,
            test_loss=test_metrics.loss,
            participants=(),
            n_flushes=0,
            messages=0,
            bytes=0,
            diverged=not (
                math.isfinite(train_loss) and math.isfinite(test_metrics.loss)
            ),
        )
        history.records.append(record)
        history.final_params = w
        if record.diverged:
            history.diverged = True
            history.divergence_note = f"non-finite loss in round {t}"
    return history
