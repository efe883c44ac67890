"""Generic controller runtime: level-based reconciliation with a deduping
work queue, per-key serialization, requeue-after, and retry backoff.

An event-based mode exists as the deliberately brittle foil: it fires only
on delivered watch notifications, never resyncs, and never retries. It is
selectable per run for adaptation controllers; built-in controllers always
run level-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .clock import SimClock, s_to_ms
from .store import ChangeNotification, ResourceStore

BACKOFF_INITIAL_S = 1
BACKOFF_CAP_S = 60

MODE_LEVEL = "level"
MODE_EVENT = "event"

GROUP_BUILTIN = "builtin"
GROUP_ADAPTATION = "adaptation"


@dataclass(frozen=True)
class ReconcileRequest:
    kind: str
    namespace: str
    name: str


@dataclass
class ReconcileResult:
    requeue_after_seconds: int = 0
    error: str | None = None


class Controller:
    """Base class for reconcilers.

    `reconcile` must be a pure function of store state plus the request key
    (and the clock): no hidden inputs, no state that matters across a
    restart. Durable counters belong in resource status.
    """

    name: str = "controller"
    primary_kind: str = ""
    watched_kinds: frozenset[str] = frozenset()
    group: str = GROUP_ADAPTATION
    max_parallel: int = 4

    def reconcile(self, request: ReconcileRequest) -> ReconcileResult:
        raise NotImplementedError

    def map_notification(
        self, note: ChangeNotification, store: ResourceStore
    ) -> Iterable[ReconcileRequest]:
        """Translate a watched-kind notification into reconcile keys.

        Default: primary-kind changes map to themselves; changes of any
        other watched kind fan out to every primary-kind resource.
        """
        if note.kind == self.primary_kind:
            return [ReconcileRequest(note.kind, note.namespace, note.name)]
        return [
            ReconcileRequest(self.primary_kind, r.meta.namespace, r.meta.name)
            for r in store.list(self.primary_kind, note.namespace)
        ]


@dataclass
class _ControllerState:
    controller: Controller
    mode: str
    generation: int = 0
    pending: dict[ReconcileRequest, bool] = field(default_factory=dict)
    in_flight: set[ReconcileRequest] = field(default_factory=set)
    dirty: set[ReconcileRequest] = field(default_factory=set)
    failures: dict[ReconcileRequest, int] = field(default_factory=dict)
    requeue_gen: dict[ReconcileRequest, int] = field(default_factory=dict)
    watch_handles: list = field(default_factory=list)
    pump_scheduled: bool = False


class ReconcileEngine:
    def __init__(
        self,
        clock: SimClock,
        store: ResourceStore,
        trace,
        mode: str = MODE_LEVEL,
        reconcile_duration_ms: int = 0,
        double_run_check: bool = False,
    ) -> None:
        if mode not in (MODE_LEVEL, MODE_EVENT):
            raise ValueError(f"unknown mode: {mode!r}")
        self.clock = clock
        self.store = store
        self.trace = trace
        self.mode = mode
        self.reconcile_duration_ms = reconcile_duration_ms
        self.double_run_check = double_run_check
        self._states: dict[str, _ControllerState] = {}

    def register(self, controller: Controller) -> None:
        if controller.name in self._states:
            raise ValueError(f"controller {controller.name} already registered")
        mode = MODE_LEVEL if controller.group == GROUP_BUILTIN else self.mode
        self._states[controller.name] = _ControllerState(controller=controller, mode=mode)

    def controller_names(self) -> list[str]:
        return list(self._states)

    def start(self) -> None:
        for state in self._states.values():
            self._attach(state)

    def restart(self, controller_name: str) -> None:
        """Crash-recover one controller: drop all in-memory state, rebuild
        watches, and (in level mode) resync every existing resource."""
        state = self._states[controller_name]
        self.trace.emit(self.clock.now_ms, "controller_restart", controller_name, {})
        for handle in state.watch_handles:
            self.store.unsubscribe(handle)
        state.watch_handles.clear()
        state.generation += 1
        state.pending.clear()
        state.in_flight.clear()
        state.dirty.clear()
        state.failures.clear()
        state.requeue_gen.clear()
        state.pump_scheduled = False
        self._attach(state)

    # -- queue ------------------------------------------------------------

    def enqueue(self, controller_name: str, request: ReconcileRequest) -> None:
        state = self._states[controller_name]
        if request in state.in_flight:
            state.dirty.add(request)
            return
        if request not in state.pending:
            state.pending[request] = True
            self._schedule_pump(state)

    def _attach(self, state: _ControllerState) -> None:
        controller = state.controller
        for kind in sorted(controller.watched_kinds):
            handle = self.store.subscribe(
                kind, self._make_watch_callback(state, state.generation), controller.name
            )
            state.watch_handles.append(handle)
        if state.mode == MODE_LEVEL:
            # Initial resync: one request per existing resource of each
            # watched kind, so a cold start cannot miss anything.
            for kind in sorted(controller.watched_kinds):
                for resource in self.store.list(kind):
                    for request in controller.map_notification(
                        ChangeNotification(kind, resource.meta.namespace, resource.meta.name, "Added"),
                        self.store,
                    ):
                        self.enqueue(controller.name, request)

    def _make_watch_callback(self, state: _ControllerState, generation: int):
        def on_notification(note: ChangeNotification) -> None:
            if state.generation != generation:
                return  # stale subscription from before a restart
            for request in state.controller.map_notification(note, self.store):
                self.enqueue(state.controller.name, request)

        return on_notification

    def _schedule_pump(self, state: _ControllerState) -> None:
        if state.pump_scheduled:
            return
        state.pump_scheduled = True
        generation = state.generation

        def pump() -> None:
            state.pump_scheduled = False
            if state.generation != generation:
                return
            self._pump(state)

        self.clock.schedule_in(0, pump)

    def _pump(self, state: _ControllerState) -> None:
        while state.pending and len(state.in_flight) < state.controller.max_parallel:
            request = next(iter(state.pending))
            del state.pending[request]
            state.in_flight.add(request)
            self._execute(state, request)

    # -- execution ----------------------------------------------------------

    def _execute(self, state: _ControllerState, request: ReconcileRequest) -> None:
        controller = state.controller
        generation = state.generation
        started_ms = self.clock.now_ms
        self.trace.emit(
            started_ms,
            "reconcile_start",
            controller.name,
            {"key": f"{request.kind}/{request.name}", "group": controller.group},
        )
        writes_before = self.store.write_count
        with self.store.as_actor(controller.name):
            try:
                result = controller.reconcile(request)
            except Exception as exc:  # controller bugs become error results
                result = ReconcileResult(error=f"{type(exc).__name__}: {exc}")
        writes = self.store.write_count - writes_before
        self.trace.emit(
            self.clock.now_ms,
            "reconcile_end",
            controller.name,
            {
                "key": f"{request.kind}/{request.name}",
                "group": controller.group,
                "error": result.error,
                "requeueAfterSeconds": result.requeue_after_seconds,
                "storeWrites": writes,
            },
        )

        if self.double_run_check and state.mode == MODE_LEVEL and result.error is None:
            writes_before = self.store.write_count
            with self.store.as_actor(controller.name):
                try:
                    controller.reconcile(request)
                except Exception as exc:
                    self.trace.emit(
                        self.clock.now_ms,
                        "idempotence_check",
                        controller.name,
                        {"key": f"{request.kind}/{request.name}", "error": str(exc)},
                    )
                else:
                    self.trace.emit(
                        self.clock.now_ms,
                        "idempotence_check",
                        controller.name,
                        {
                            "key": f"{request.kind}/{request.name}",
                            "storeWrites": self.store.write_count - writes_before,
                        },
                    )

        def finish() -> None:
            if state.generation != generation:
                return
            state.in_flight.discard(request)
            self._after_run(state, request, result)
            if state.pending:
                self._schedule_pump(state)

        if self.reconcile_duration_ms > 0:
            self.clock.schedule_in(self.reconcile_duration_ms, finish)
        else:
            finish()

    def _after_run(self, state: _ControllerState, request: ReconcileRequest, result: ReconcileResult) -> None:
        rerun_now = request in state.dirty
        state.dirty.discard(request)

        if state.mode == MODE_EVENT:
            # Brittle by design: no retries, no periodic requeue. A key
            # re-dirtied by a delivered notification still runs again.
            if rerun_now:
                self.enqueue(state.controller.name, request)
            return

        if result.error is not None:
            n = state.failures.get(request, 0)
            state.failures[request] = n + 1
            backoff_s = min(BACKOFF_INITIAL_S * (2**n), BACKOFF_CAP_S)
            self._schedule_requeue(state, request, s_to_ms(backoff_s))
            return

        state.failures.pop(request, None)
        if rerun_now:
            self.enqueue(state.controller.name, request)
        if result.requeue_after_seconds > 0:
            self._schedule_requeue(state, request, s_to_ms(result.requeue_after_seconds))

    def _schedule_requeue(self, state: _ControllerState, request: ReconcileRequest, delay_ms: int) -> None:
        # One outstanding timer per key: a newer timer supersedes older ones,
        # otherwise notification-triggered runs would multiply the cadence.
        token = state.requeue_gen.get(request, 0) + 1
        state.requeue_gen[request] = token
        generation = state.generation

        def fire() -> None:
            if state.generation != generation or state.requeue_gen.get(request) != token:
                return
            self.enqueue(state.controller.name, request)

        self.clock.schedule_in(delay_ms, fire)
