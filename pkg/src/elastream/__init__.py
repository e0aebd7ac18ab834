"""Elastic event-stream processing with live operator migration and exactly-once output."""

from . import workloads  # registers the shipped operator logics
from .event_core import Event, EventKind, TimestampVector
from .operator_runtime import OperatorDescriptor, OperatorLogic, register_logic

__all__ = ["Event", "EventKind", "OperatorDescriptor", "OperatorLogic", "TimestampVector",
           "register_logic", "workloads"]
