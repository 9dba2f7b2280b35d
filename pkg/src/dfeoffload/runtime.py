"""The offload decision layer: cost model, config cache, rollback policy.

Rather than predicting device performance in detail, the runtime keeps
per-kernel moving averages of measured software and offloaded times and
rolls back to software for good when offloading proves slower.  Successful
mappings are cached by graph hash so repeat invocations skip place & route
entirely.
"""

from __future__ import annotations

import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import kernels as kl
from .dfg import DataFlowGraph, DfgStats, dfg_hash, dfg_stats
from .frontend import (EligibilityReport, Reason, Thresholds, UnrollTooLarge,
                       check_eligibility, extract_dfg)
from .overlay import OverlayConfig, OverlayShape
from .placer import Placement, PlacerParams, Unroutable, place_and_route
from .simulator import (FRAME_SIZE, RunReport, build_streams, compile_config,
                        run_compiled, write_back)

WORD_SIZE = 4


@dataclass
class CostModel:
    """Transfer and configuration timing constants (seconds, bytes/second)."""

    wire_rate: float = 230e6
    frame_overhead_factor: int = 4  # 128 wire bits per 32 payload bits
    config_time: float = 2.1e-3
    const_transfer_time: float = 55e-6
    software_time_per_call: float = 0.0  # measured online, 0 = unknown

    def __post_init__(self):
        if self.wire_rate <= 0 or self.config_time <= 0 or self.const_transfer_time <= 0:
            raise ValueError("cost model constants must be positive")
        if self.frame_overhead_factor != 4:
            raise ValueError("frame overhead factor is fixed by the wire format")

    @staticmethod
    def from_file(path: str | Path) -> "CostModel":
        """Read key=value overrides ('#' comments allowed) over the defaults."""
        values = {}
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
        return CostModel._with_overrides(values)

    @staticmethod
    def from_env(env: dict[str, str], prefix: str = "DFEOFFLOAD_") -> "CostModel":
        values = {}
        for name in ("wire_rate", "config_time", "const_transfer_time",
                     "frame_overhead_factor", "software_time_per_call"):
            raw = env.get(prefix + name.upper())
            if raw is not None:
                values[name] = raw
        return CostModel._with_overrides(values)

    @staticmethod
    def _with_overrides(values: dict[str, str]) -> "CostModel":
        kwargs = {}
        for name, raw in values.items():
            if name == "frame_overhead_factor":
                kwargs[name] = int(raw)
            elif name in ("wire_rate", "config_time", "const_transfer_time",
                          "software_time_per_call"):
                kwargs[name] = float(raw)
            else:
                raise KeyError(f"unknown cost-model key {name!r}")
        return CostModel(**kwargs)


def estimate_offload_time(stats: DfgStats, n_iterations: int,
                          model: CostModel, cached: bool) -> float:
    """Predicted seconds for one offloaded call.

    Configuration cost is skipped when the mapping is already cached; the
    data term is the wire time for every streamed word at 16 bytes each
    (4-byte payload times the 4x frame overhead).
    """
    if n_iterations < 0:
        raise ValueError("iteration count must be nonnegative")
    t = 0.0 if cached else model.config_time
    t += model.const_transfer_time
    bytes_per_word = WORD_SIZE * model.frame_overhead_factor
    t += bytes_per_word * n_iterations * (stats.inputs + stats.outputs) / model.wire_rate
    return t


class Mode(Enum):
    SOFTWARE = "software"
    OFFLOADED = "offloaded"
    ROLLED_BACK = "rolled_back"


@dataclass
class OffloadState:
    """Per-kernel execution statistics driving the rollback policy.

    ROLLED_BACK is absorbing: once offloading measured worse than software
    it stays off until the graph changes (new hash, new state) or an
    explicit reset.
    """

    alpha: float = 0.2
    warmup_calls: int = 5
    mode: Mode = Mode.SOFTWARE
    ema_software: Optional[float] = None
    ema_offload: Optional[float] = None
    software_calls: int = 0
    offload_calls: int = 0

    def reset(self) -> None:
        self.mode = Mode.SOFTWARE
        self.ema_software = None
        self.ema_offload = None
        self.software_calls = 0
        self.offload_calls = 0


def decide(state: OffloadState, estimate: float, measured_software: float,
           margin: float = 0.9) -> Mode:
    """Offload only when the estimate clearly beats measured software time."""
    if measured_software <= 0:
        raise ValueError("measured software time must be positive")
    if state.mode == Mode.ROLLED_BACK:
        return Mode.SOFTWARE
    if estimate < margin * measured_software:
        return Mode.OFFLOADED
    return Mode.SOFTWARE


def record(state: OffloadState, mode: Mode, elapsed: float) -> OffloadState:
    """Fold one measured call into the state; may trip the rollback."""
    if elapsed <= 0:
        raise ValueError("elapsed time must be positive")
    a = state.alpha
    if mode == Mode.SOFTWARE:
        state.software_calls += 1
        state.ema_software = (elapsed if state.ema_software is None
                              else a * elapsed + (1 - a) * state.ema_software)
    elif mode == Mode.OFFLOADED:
        state.offload_calls += 1
        state.ema_offload = (elapsed if state.ema_offload is None
                             else a * elapsed + (1 - a) * state.ema_offload)
        state.mode = Mode.OFFLOADED
        if (state.offload_calls >= state.warmup_calls
                and state.ema_software is not None
                and state.ema_offload > state.ema_software):
            state.mode = Mode.ROLLED_BACK
    else:
        raise ValueError("record takes SOFTWARE or OFFLOADED")
    return state


@dataclass
class CacheEntry:
    key: int
    config: OverlayConfig
    placement: Placement
    dfg: DataFlowGraph
    hit_count: int = 0
    mean_offload_time: float = 0.0


class ConfigCache:
    """LRU map from graph hash to ready-to-run configuration.

    Reads are cheap and common, writes rare; a single lock keeps both
    consistent for concurrent callers.
    """

    def __init__(self, capacity: int = 32):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: OrderedDict[int, CacheEntry] = OrderedDict()
        self._lock = threading.RLock()

    def get(self, key: int) -> Optional[CacheEntry]:
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None:
                self._entries.move_to_end(key)
                entry.hit_count += 1
            return entry

    def put(self, entry: CacheEntry) -> None:
        with self._lock:
            self._entries[entry.key] = entry
            self._entries.move_to_end(entry.key)
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


@dataclass
class TraceEvent:
    t_us: float
    phase: str
    detail: str = ""

    def line(self) -> str:
        return f"{self.t_us:.1f} {self.phase} {self.detail}".rstrip()


def format_trace(events: list[TraceEvent]) -> str:
    return "\n".join(e.line() for e in events) + "\n"


class OffloadRuntime:
    """End-to-end pipeline: analyze, map (or fetch), decide, execute, record.

    Whatever path a call takes (offloaded, rejected, rolled back, or
    unroutable), the returned arrays match pure software evaluation.
    Offloaded elapsed time is the simulated device time from
    ``device_model`` (the virtual hardware's clock); software elapsed time
    is wall-clock.  Distinct kernels may execute concurrently: cache and
    per-kernel state updates are lock-protected.
    """

    def __init__(self, shape: OverlayShape,
                 thresholds: Optional[Thresholds] = None,
                 placer_params: PlacerParams = PlacerParams(),
                 cost_model: Optional[CostModel] = None,
                 device_model: Optional[CostModel] = None,
                 margin: float = 0.9,
                 alpha: float = 0.2,
                 warmup_calls: int = 5,
                 cache_capacity: int = 32,
                 unroll: int = 1,
                 seed: int = 0,
                 backend: Optional[str] = None,
                 clock: Callable[[], float] = time.perf_counter):
        self.shape = shape
        self.thresholds = thresholds or Thresholds(
            max_nodes=shape.rows * shape.cols)
        self.placer_params = placer_params
        self.cost_model = cost_model or CostModel()
        self.device_model = device_model or self.cost_model
        self.margin = margin
        self.alpha = alpha
        self.warmup_calls = warmup_calls
        self.cache = ConfigCache(cache_capacity)
        self.unroll = unroll
        self.seed = seed
        self.backend = backend
        self.clock = clock
        self._states: dict[int, OffloadState] = {}
        self._lock = threading.RLock()

    def state_for(self, key: int) -> OffloadState:
        with self._lock:
            if key not in self._states:
                self._states[key] = OffloadState(self.alpha, self.warmup_calls)
            return self._states[key]

    # -- the pipeline ---------------------------------------------------------

    def execute(self, kernel: kl.Kernel, arrays: dict[str, np.ndarray],
                params: dict[str, int]
                ) -> tuple[dict[str, np.ndarray], list[TraceEvent]]:
        trace: list[TraceEvent] = []
        t0 = self.clock()

        def emit(phase: str, detail: str = ""):
            trace.append(TraceEvent((self.clock() - t0) * 1e6, phase, detail))

        def software(detail: str, state: Optional[OffloadState]):
            start = self.clock()
            result = kl.evaluate_kernel(kernel, arrays, params)
            elapsed = self.clock() - start
            if state is not None:
                record(state, Mode.SOFTWARE, max(elapsed, 1e-9))
            emit("software", detail)
            return result, trace

        report = check_eligibility(kernel, self.thresholds)
        if not report.accepted():
            emit("analysis", f"rejected: {report.table_label()}")
            return software(f"ineligible: {report.reason.value}", None)
        try:
            dfg = extract_dfg(kernel, self.unroll,
                              max_calc_nodes=self.thresholds.max_nodes)
        except UnrollTooLarge as exc:
            emit("analysis", f"unroll too large: {exc}")
            return software("unroll too large", None)
        key = dfg_hash(dfg)
        stats = dfg_stats(dfg)
        emit("analysis", f"accepted hash={key:016x} "
                         f"in={stats.inputs} out={stats.outputs} calc={stats.calc_nodes}")
        state = self.state_for(key)

        entry = self.cache.get(key)
        cached = entry is not None
        if not cached:
            pr_start = self.clock()
            try:
                placement = place_and_route(dfg, self.shape,
                                            self.placer_params, self.seed)
            except Unroutable as exc:
                emit("place_route", f"unroutable: {exc}")
                return software("unroutable, software fallback", state)
            config = placement.apply()
            entry = CacheEntry(key, config, placement, dfg)
            self.cache.put(entry)
            emit("place_route",
                 f"placed in {(self.clock() - pr_start) * 1e3:.2f} ms, "
                 f"attempts={placement.counters.position_attempts}")
        else:
            emit("cache", "hit, reusing configuration")

        trips = self._trips(kernel, params)
        n_iter = self._stream_length(dfg, trips)
        baseline = state.ema_software
        if baseline is None and self.cost_model.software_time_per_call > 0:
            baseline = self.cost_model.software_time_per_call
        if baseline is None:
            return software("measuring software baseline", state)
        estimate = estimate_offload_time(stats, n_iter, self.cost_model, cached)
        decision = decide(state, estimate, baseline, self.margin)
        emit("decision", f"estimate={estimate:.3e}s software={baseline:.3e}s "
                         f"-> {decision.value}")
        if decision != Mode.OFFLOADED:
            return software("decision: software", state)

        device_elapsed = 0.0
        config_cost = 0.0 if cached else self.device_model.config_time
        config_cost += self.device_model.const_transfer_time
        device_elapsed += config_cost
        emit("configure", f"{'cached, ' if cached else ''}"
                          f"consts={len(entry.placement.masks)} "
                          f"t={config_cost * 1e6:.1f}us")

        streams = build_streams(entry.dfg, arrays, trips)
        run_report = run_compiled(compile_config(entry.config), streams,
                                  self.backend)
        t_in = FRAME_SIZE * run_report.frames_in / self.device_model.wire_rate
        device_elapsed += t_in
        emit("transfer_in", f"frames={run_report.frames_in} t={t_in * 1e6:.1f}us")
        emit("compute", f"cycles={run_report.cycles}")
        t_out = FRAME_SIZE * run_report.frames_out / self.device_model.wire_rate
        device_elapsed += t_out
        emit("transfer_out", f"frames={run_report.frames_out} t={t_out * 1e6:.1f}us")

        result = write_back(entry.dfg, run_report, arrays, trips)
        remainder = self._remainder(entry.dfg, trips)
        if remainder:
            inner_var, inner_n = trips[-1]
            result = kl.evaluate_kernel(kernel, result, params,
                                        innermost_start=inner_n - remainder)
            emit("epilogue", f"{remainder} leftover iterations of {inner_var}")

        entry.mean_offload_time = (
            device_elapsed if entry.hit_count == 0 else
            (entry.mean_offload_time * entry.hit_count + device_elapsed)
            / (entry.hit_count + 1))
        record(state, Mode.OFFLOADED, device_elapsed)
        if state.mode == Mode.ROLLED_BACK:
            emit("rollback", "offload slower than software; reverting for good")
        return result, trace

    def _trips(self, kernel: kl.Kernel, params: dict[str, int]
               ) -> list[tuple[str, int]]:
        loops, _ = kernel.canonical_nest()
        trips = []
        for f in loops:
            n = f.bound if isinstance(f.bound, int) else params[f.bound]
            if n < 0:
                raise ValueError(f"negative trip count for loop {f.var}")
            trips.append((f.var, n))
        return trips

    @staticmethod
    def _stream_length(dfg: DataFlowGraph, trips: list[tuple[str, int]]) -> int:
        """Stream positions per run: the unrolled steady-state domain size."""
        stride = dfg.remainder.factor if dfg.remainder is not None else 1
        n = 1
        for _, count in trips[:-1]:
            n *= count
        return n * (trips[-1][1] // stride)

    def _remainder(self, dfg: DataFlowGraph, trips: list[tuple[str, int]]) -> int:
        if dfg.remainder is None:
            return 0
        return trips[-1][1] % dfg.remainder.factor


def execute_kernel(kernel: kl.Kernel, arrays: dict[str, np.ndarray],
                   params: dict[str, int], shape: OverlayShape,
                   runtime: Optional[OffloadRuntime] = None,
                   **runtime_kwargs
                   ) -> tuple[dict[str, np.ndarray], list[TraceEvent]]:
    """One-shot convenience wrapper around OffloadRuntime.execute."""
    rt = runtime or OffloadRuntime(shape, **runtime_kwargs)
    return rt.execute(kernel, arrays, params)
