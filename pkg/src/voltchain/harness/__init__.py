from voltchain.harness.bus import Message, MessageBus
from voltchain.harness.reports import emit_reports, write_ledger_traces
from voltchain.harness.runner import (
    ReplicaDivergence,
    RunReport,
    Simulation,
    replay_traces,
    run_simulation,
)
from voltchain.harness.scenario import (
    ParseError,
    ScenarioConfig,
    ScenarioError,
    ValidationError,
    load_scenario,
    parse_scenario,
)

__all__ = [
    "Message", "MessageBus", "emit_reports", "ReplicaDivergence", "RunReport", "Simulation",
    "run_simulation", "ParseError", "ScenarioConfig", "ScenarioError", "ValidationError",
    "load_scenario", "parse_scenario", "replay_traces", "write_ledger_traces",
]
