"""Attack harness: scenarios, spy agent, wire protocol and collector."""

from .protocol import SpyMessage, decode_message, encode_message
from .scenario import Scenario, builtin_scenarios, load_scenario
from .trace import TemperatureTrace, TraceSummary, evaluate_trace
from .agent import AgentConfig
from .collector import CollectorConfig
from .run import ScenarioRun, execute_scenario, run_scenario

__all__ = [
    "AgentConfig",
    "CollectorConfig",
    "Scenario",
    "ScenarioRun",
    "SpyMessage",
    "TemperatureTrace",
    "TraceSummary",
    "builtin_scenarios",
    "decode_message",
    "encode_message",
    "execute_scenario",
    "evaluate_trace",
    "load_scenario",
    "run_scenario",
]
