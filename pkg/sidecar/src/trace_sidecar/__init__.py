"""HTTP generation sidecar exposing per-token trace data for causal LMs."""

from .tracing import (
    ATTENTION_POLICY,
    TRACE_FORMAT,
    GenerationParams,
    SidecarConfig,
    SidecarError,
    TraceGenerator,
)
from .server import create_app, serve

__version__ = "0.1.0"

__all__ = [
    "ATTENTION_POLICY",
    "TRACE_FORMAT",
    "GenerationParams",
    "SidecarConfig",
    "SidecarError",
    "TraceGenerator",
    "create_app",
    "serve",
]
