from .event_log import EventLog, verifyLog
from .simnet import Scenario, injectFault, run

__all__ = ["EventLog", "Scenario", "injectFault", "run", "verifyLog"]
