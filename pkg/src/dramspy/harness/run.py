"""End-to-end scenario runs: agent -> transport -> collector -> trace."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..countermeasures import Refused
from ..dram import CellArray
from .agent import AgentConfig, SpyAgent, Truth
from .collector import Collector, CollectorConfig
from .protocol import encode_message
from .scenario import Scenario
from .trace import TemperatureTrace
from .transport import CollectorServer, LoopbackTransport, SocketTransport

LOOPBACK = "loopback"
SOCKET = "socket"


@dataclass(frozen=True, eq=False)
class ScenarioRun:
    trace: TemperatureTrace
    messages_sent: int
    refused: Refused | None = None
    gaps: list = field(default_factory=list)
    final_p: float | None = None


def _join(estimates, truths: dict[float, Truth]) -> TemperatureTrace:
    rows = [(e.timestamp_s, truths[e.timestamp_s], e.inferred_c) for e in estimates if e.timestamp_s in truths]
    if not rows:
        return TemperatureTrace.empty()
    return TemperatureTrace(
        [r[0] for r in rows],
        [r[1].ambient_c for r in rows],
        [r[1].device_c for r in rows],
        [r[2] for r in rows],
    )


def execute_scenario(
    array: CellArray,
    scenario: Scenario,
    agent_cfg: AgentConfig,
    collector_cfg: CollectorConfig,
    transport: str = LOOPBACK,
) -> ScenarioRun:
    collector = Collector(collector_cfg)
    if transport == LOOPBACK:
        server = None
        chan = LoopbackTransport(collector)
    elif transport == SOCKET:
        server = CollectorServer(collector, max_connections=1).start()
        chan = SocketTransport(*server.address, max_retries=agent_cfg.max_retries, backoff_s=agent_cfg.backoff_s)
    else:
        raise ValueError(f"unknown transport {transport!r}")

    agent = SpyAgent(array, scenario, agent_cfg)
    truths: dict[float, Truth] = {}
    sent = 0
    try:
        for msg, truth in agent.messages():
            # truth travels out of band; the wire only carries the flip count
            if truth is not None:
                truths[msg.timestamp_s] = truth
            chan.send(encode_message(msg).encode("ascii"))
            sent += 1
    finally:
        chan.close()
        if server is not None:
            if sent == 0:
                server.stop()
            else:
                server.join()
    estimates = collector.finish()
    p = getattr(collector.model, "p", None)
    return ScenarioRun(_join(estimates, truths), sent, agent.refused, list(collector.gaps), p)


def run_scenario(
    array: CellArray,
    scenario: Scenario,
    agent_cfg: AgentConfig,
    collector_cfg: CollectorConfig,
    transport: str = LOOPBACK,
) -> TemperatureTrace:
    """Replay ``scenario`` on ``array`` and return the collector's inferred trace."""
    return execute_scenario(array, scenario, agent_cfg, collector_cfg, transport).trace
