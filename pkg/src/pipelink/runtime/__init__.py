"""Distributed pipeline runtime: framing, engines, sockets, orchestration."""

from .digest import fold, fold_all, h64, module_out, sample_seed, token_input
from .engine import (
    ActivationIn,
    DeviceEngine,
    EngineConfig,
    EngineError,
    Epoch,
    EpochTable,
    LocalRing,
    PendingResiduals,
    ResidualOut,
    ResidualTimeout,
    build_engines,
)
from .framing import (
    CtrlKind,
    Message,
    MsgType,
    ProtocolError,
    ResEntry,
    TOKEN_SOURCE,
    encode_message,
    read_message,
)
from .pipeline import (
    BalancerConfig,
    RebalanceEvent,
    RunReport,
    RuntimeConfig,
    TokenRecord,
    run_pipeline,
)
from .reference import RunDigests, run_reference
from .routing import (
    MODE_DIRECT,
    MODE_PIGGYBACK,
    MODES,
    ModuleTable,
    consumers_by_producer,
    owner_map,
    producers_by_consumer,
    ring_successor,
)
from .shaping import DelayedDelivery, ShapedSender
from .worker import SocketWorker, WorkerError, aux_port, data_port
from .workload import Workload

__all__ = [
    "ActivationIn",
    "BalancerConfig",
    "CtrlKind",
    "DelayedDelivery",
    "DeviceEngine",
    "EngineConfig",
    "EngineError",
    "Epoch",
    "EpochTable",
    "LocalRing",
    "MODE_DIRECT",
    "MODE_PIGGYBACK",
    "MODES",
    "Message",
    "ModuleTable",
    "MsgType",
    "PendingResiduals",
    "ProtocolError",
    "RebalanceEvent",
    "ResEntry",
    "ResidualOut",
    "ResidualTimeout",
    "RunDigests",
    "RunReport",
    "RuntimeConfig",
    "ShapedSender",
    "SocketWorker",
    "TOKEN_SOURCE",
    "TokenRecord",
    "WorkerError",
    "Workload",
    "aux_port",
    "build_engines",
    "consumers_by_producer",
    "data_port",
    "encode_message",
    "fold",
    "fold_all",
    "h64",
    "module_out",
    "owner_map",
    "producers_by_consumer",
    "read_message",
    "ring_successor",
    "run_pipeline",
    "run_reference",
    "sample_seed",
    "token_input",
]
