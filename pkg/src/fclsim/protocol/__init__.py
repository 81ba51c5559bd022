"""Federated protocol variants, synchronisation maths and the byte ledger."""

from fclsim.protocol.ledger import COMPONENTS, CommLedger, LedgerEntry
from fclsim.protocol.probe import linear_probe
from fclsim.protocol.rounds import (
    ClientState,
    FederationResult,
    ProtocolConfig,
    RoundResult,
    ServerState,
    Variant,
    fcl_round,
    fclopt_client_train,
    fclopt_round,
    moco_client_train,
    run_federation,
)
from fclsim.protocol.sync import (
    aggregate_params,
    calibrate_alpha,
    client_distance,
    predict_distance,
    ptnu,
    ptnu_steps,
)

__all__ = [
    "COMPONENTS",
    "ClientState",
    "CommLedger",
    "FederationResult",
    "LedgerEntry",
    "ProtocolConfig",
    "RoundResult",
    "ServerState",
    "Variant",
    "aggregate_params",
    "calibrate_alpha",
    "client_distance",
    "fcl_round",
    "fclopt_client_train",
    "fclopt_round",
    "linear_probe",
    "moco_client_train",
    "predict_distance",
    "ptnu",
    "ptnu_steps",
    "run_federation",
]
