"""
Level-of-Trust (LoT) verifier.

One comparison per time slot:

    match     -> LoT + 1, timer reset
    mismatch  -> LoT - 1, timer advances one slot
    no_token  -> LoT unchanged, timer advances one slot

then stop if LoT <= critical level or the timer exceeds k, and otherwise
lower LoT back to x when it reaches a * x (skipped when a = 1).

Trace file format: '#'-prefixed "key=value" metadata lines, a header line
`slot_index,outcome,lot,timer,status`, then one row per state. The initial
state has outcome `init`.
"""

import csv
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

from config import Lot
from errors import ContractError, LotConfigError, ScenarioError, TerminalStateError

logger = logging.getLogger(__name__)


class LotStatus(Enum):
    RUNNING = 'running'
    STOPPED_CRITICAL = 'stopped_critical'
    STOPPED_TIMEOUT = 'stopped_timeout'
    COMPLETED = 'completed'


class SlotOutcome(Enum):
    MATCH = 'match'
    MISMATCH = 'mismatch'
    NO_TOKEN = 'no_token'


@dataclass(frozen=True)
class LotConfig:
    initial_x: int = Lot.DEFAULT_INITIAL_X
    critical_a: int = Lot.DEFAULT_CRITICAL_A
    slot_duration: float = 1.0
    timer_limit_k: Optional[float] = None  # seconds; None = default slot count

    def __post_init__(self):
        if self.slot_duration <= 0:
            raise LotConfigError(f"slot_duration must be positive, got {self.slot_duration}")
        if self.timer_limit_k is None:
            object.__setattr__(self, 'timer_limit_k', Lot.DEFAULT_TIMER_SLOTS * self.slot_duration)
        if self.timer_limit_k < 0:
            raise LotConfigError(f"timer_limit_k must be non-negative, got {self.timer_limit_k}")
        if self.critical_a < 1:
            raise LotConfigError(f"critical_a must be >= 1, got {self.critical_a}")
        if self.initial_x <= self.critical_a:
            raise LotConfigError(
                f"initial_x ({self.initial_x}) must exceed critical_a ({self.critical_a})")

    @property
    def cap_enabled(self) -> bool:
        return self.critical_a > 1

    @property
    def cap(self) -> int:
        return self.critical_a * self.initial_x


@dataclass(frozen=True)
class LotState:
    lot: int
    timer: float = 0.0
    slot_index: int = 0
    status: LotStatus = LotStatus.RUNNING
    idle_slots: int = 0  # slots since the last match

    @property
    def running(self) -> bool:
        return self.status == LotStatus.RUNNING


@dataclass(frozen=True)
class SlotEvent:
    slot_index: int
    outcome: SlotOutcome


def lot_init(cfg: LotConfig) -> LotState:
    if not isinstance(cfg, LotConfig):
        raise LotConfigError("lot_init needs a LotConfig")
    return LotState(lot=cfg.initial_x)


def lot_step(st: LotState, ev: SlotEvent, cfg: LotConfig) -> LotState:
    if not st.running:
        raise TerminalStateError(f"Verifier already {st.status.value} at slot {st.slot_index}")
    if ev.slot_index != st.slot_index:
        raise ContractError(f"Event for slot {ev.slot_index} applied at slot {st.slot_index}")

    lot, idle = st.lot, st.idle_slots
    if ev.outcome == SlotOutcome.MATCH:
        lot, idle = lot + 1, 0
    elif ev.outcome == SlotOutcome.MISMATCH:
        lot, idle = lot - 1, idle + 1
    else:
        idle += 1
    timer = idle * cfg.slot_duration

    status = LotStatus.RUNNING
    if lot <= cfg.critical_a:
        status = LotStatus.STOPPED_CRITICAL
    elif timer > cfg.timer_limit_k:
        status = LotStatus.STOPPED_TIMEOUT
    elif cfg.cap_enabled and lot == cfg.cap:
        logger.debug(f"LoT reached cap {cfg.cap} at slot {st.slot_index}; lowered to {cfg.initial_x}")
        lot = cfg.initial_x

    return LotState(lot=lot, timer=timer, slot_index=st.slot_index + 1,
                    status=status, idle_slots=idle)


def lot_finish(st: LotState) -> LotState:
    """End of transmission: a running verifier completes."""
    if not st.running:
        return st
    return replace(st, status=LotStatus.COMPLETED)


def lot_trace(events: Sequence[SlotEvent], cfg: LotConfig) -> List[LotState]:
    states = [lot_init(cfg)]
    for ev in events:
        if not states[-1].running:
            break
        states.append(lot_step(states[-1], ev, cfg))
    return states


# -- Trace export / import --------------------------------------------------

@dataclass(frozen=True)
class TraceRow:
    slot_index: int
    outcome: str
    lot: int
    timer: float
    status: str


def trace_rows(states: Sequence[LotState], outcomes: Sequence[SlotOutcome]) -> List[TraceRow]:
    """Pair states with the outcome that produced them (first state: init)."""
    if len(outcomes) < len(states) - 1:
        raise ContractError("Fewer outcomes than state transitions")
    rows = []
    for i, st in enumerate(states):
        outcome = 'init' if i == 0 else outcomes[i - 1].value
        rows.append(TraceRow(st.slot_index, outcome, st.lot, round(st.timer, 6), st.status.value))
    return rows


def write_trace(path, rows: Sequence[TraceRow], cfg: LotConfig):
    with open(path, 'w', newline='') as f:
        f.write(f"# initial_x={cfg.initial_x}\n")
        f.write(f"# critical_a={cfg.critical_a}\n")
        f.write(f"# timer_limit_k={cfg.timer_limit_k:g}\n")
        f.write(f"# slot_duration={cfg.slot_duration:g}\n")
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(Lot.TRACE_COLUMNS)
        for row in rows:
            writer.writerow([row.slot_index, row.outcome, row.lot, f"{row.timer:g}", row.status])


def read_trace(path) -> Tuple[dict, List[TraceRow]]:
    """Parse a trace file; returns (metadata, rows)."""
    meta = {}
    rows = []
    header_seen = False
    valid_outcomes = {o.value for o in SlotOutcome} | {'init'}
    valid_status = {s.value for s in LotStatus}
    with open(path, 'r', newline='') as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith('#'):
                key, sep, value = line[1:].strip().partition('=')
                if not sep:
                    raise ScenarioError(f"Malformed metadata line: {line!r}", str(path), lineno)
                meta[key.strip()] = value.strip()
                continue
            fields = next(csv.reader([line]))
            if not header_seen:
                if fields != Lot.TRACE_COLUMNS:
                    raise ScenarioError(f"Expected header {','.join(Lot.TRACE_COLUMNS)}", str(path), lineno)
                header_seen = True
                continue
            if len(fields) != len(Lot.TRACE_COLUMNS):
                raise ScenarioError(f"Expected {len(Lot.TRACE_COLUMNS)} fields, got {len(fields)}",
                                    str(path), lineno)
            try:
                row = TraceRow(int(fields[0]), fields[1], int(fields[2]), float(fields[3]), fields[4])
            except ValueError as e:
                raise ScenarioError(f"Bad value: {e}", str(path), lineno)
            if row.outcome not in valid_outcomes or row.status not in valid_status:
                raise ScenarioError(f"Unknown outcome or status in {line!r}", str(path), lineno)
            rows.append(row)
    if not header_seen:
        raise ScenarioError("Missing trace header", str(path))
    return meta, rows
