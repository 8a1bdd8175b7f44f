"""Deterministic discrete-event simulation of committees, clients and adversaries."""

from .adversary import (
    AdversarySpec,
    Crash,
    DelayMax,
    Drop,
    EquivocateSeq,
    SelectiveBeaconSend,
    SpecError,
    StaleSealOnRestart,
    StallingClient,
)
from .engine import ConfigError, Metrics, Simulator, Trace, TraceRecord, verify_trace_chain
from .hosts import Client, ClientSubmit, Network, ReplicaHost
from .network import DelayModel, Fixed, RegionMatrix, Uniform, delay_model_from_json

__all__ = [
    "AdversarySpec", "Crash", "DelayMax", "Drop", "EquivocateSeq", "SelectiveBeaconSend", "SpecError",
    "StaleSealOnRestart", "StallingClient", "ConfigError", "Metrics", "Simulator", "Trace", "TraceRecord",
    "verify_trace_chain", "Client", "ClientSubmit", "Network", "ReplicaHost", "DelayModel", "Fixed",
    "RegionMatrix", "Uniform", "delay_model_from_json",
]
