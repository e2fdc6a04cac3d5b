"""Deterministic desk-scale simulator for federated fine-tuning.

A server holds a public data shard, C clients hold non-IID private
shards, and three optimization regimes run over them: centralized
(public data only), federated averaging (private data only, queued
aggregation at a threshold), and the combined regime that adds a
server-side public-data phase to every federated round.
"""

from .data import (
    Dataset,
    PartitionPlan,
    Shard,
    gen_blobs,
    label_histogram,
    load_csv,
    partition_dirichlet,
    partition_iid,
    partition_label_shards,
    sample_kshot,
    split_public_private,
    stratified_split,
)
from .federation import (
    ClientUpdate,
    FedConfig,
    Flush,
    Pending,
    RoundHistory,
    UpdateQueue,
    aggregate,
    central_optimize,
    evaluate,
    local_train,
    run_centralized,
    run_fedavg,
    run_ffm,
    select_clients,
)
from .harness import (
    ExperimentConfig,
    ExperimentReport,
    emit,
    load_config,
    parse_config,
    run_compare,
    run_experiment,
    run_sweep,
    summarize,
)
from .models import (
    AdapterComposite,
    Batch,
    Logistic,
    Mlp,
    SoftPrompt,
    finite_diff_grad,
    forward,
    init_params,
    loss_and_grad,
    predict,
    sgd_epoch,
)
from .params import Layout, ParameterVector
from .simnet import Event, LatencyModel, Network, comm_totals

__version__ = "0.1.0"

__all__ = [
    "AdapterComposite", "Batch", "ClientUpdate", "Dataset", "Event",
    "ExperimentConfig", "ExperimentReport", "FedConfig", "Flush",
    "LatencyModel", "Layout", "Logistic", "Mlp", "Network",
    "ParameterVector", "PartitionPlan", "Pending", "RoundHistory", "Shard",
    "SoftPrompt", "UpdateQueue", "aggregate", "central_optimize",
    "comm_totals", "emit", "evaluate", "finite_diff_grad", "forward",
    "gen_blobs", "init_params", "label_histogram", "load_config",
    "load_csv", "local_train", "loss_and_grad", "parse_config",
    "partition_dirichlet", "partition_iid", "partition_label_shards",
    "predict", "run_centralized", "run_compare", "run_experiment",
    "run_fedavg", "run_ffm", "run_sweep", "sample_kshot", "select_clients",
    "sgd_epoch", "split_public_private", "stratified_split", "summarize",
]
