"""In-memory declarative resource store modeling the cluster API.

Resources are typed objects with a spec (desired state, written by clients
and operators) and a status (observed state, written by controllers and
the simulator). All mutation goes through compare-and-swap on the
per-object resourceVersion; readers always get an isolated snapshot.
Watch subscribers receive change notifications after each commit, but
delivery may be deliberately lossy under fault injection — nothing in the
system is allowed to depend on it for correctness.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator
from contextlib import contextmanager

KNOWN_KINDS = (
    "Deployment",
    "Pod",
    "Service",
    "HorizontalPodAutoscaler",
    "TeaStoreConfig",
    "RecommenderModel",
)

API_VERSIONS = {
    "Deployment": "apps/v1",
    "Pod": "v1",
    "Service": "v1",
    "HorizontalPodAutoscaler": "autoscaling/v2",
    "TeaStoreConfig": "adaptive.io/v1",
    "RecommenderModel": "adaptive.io/v1",
}

DEFAULT_NAMESPACE = "default"


class NotFoundError(KeyError):
    """The (kind, namespace, name) key does not identify a live resource."""

    def __init__(self, kind: str, namespace: str, name: str):
        super().__init__(f"{kind} {namespace}/{name} not found")
        self.kind = kind
        self.namespace = namespace
        self.name = name


class AlreadyExistsError(ValueError):
    pass


@dataclass
class ObjectMeta:
    name: str
    namespace: str = DEFAULT_NAMESPACE
    labels: dict[str, str] = field(default_factory=dict)
    resource_version: int = 0
    generation: int = 0


@dataclass
class Resource:
    """One declarative object; spec and status are plain JSON-able dicts."""

    kind: str
    meta: ObjectMeta
    spec: dict[str, Any] = field(default_factory=dict)
    status: dict[str, Any] = field(default_factory=dict)

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.kind, self.meta.namespace, self.meta.name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "apiVersion": API_VERSIONS[self.kind],
            "kind": self.kind,
            "metadata": {
                "name": self.meta.name,
                "namespace": self.meta.namespace,
                "labels": dict(self.meta.labels),
                "resourceVersion": self.meta.resource_version,
                "generation": self.meta.generation,
            },
            "spec": copy.deepcopy(self.spec),
            "status": copy.deepcopy(self.status),
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "Resource":
        kind = obj.get("kind")
        if kind not in KNOWN_KINDS:
            raise ValueError(f"unknown kind: {kind!r}")
        md = obj.get("metadata", {})
        if not md.get("name"):
            raise ValueError(f"{kind} object is missing metadata.name")
        meta = ObjectMeta(
            name=md["name"],
            namespace=md.get("namespace", DEFAULT_NAMESPACE),
            labels=dict(md.get("labels", {})),
            resource_version=int(md.get("resourceVersion", 0)),
            generation=int(md.get("generation", 0)),
        )
        return cls(
            kind=kind,
            meta=meta,
            spec=copy.deepcopy(obj.get("spec", {})),
            status=copy.deepcopy(obj.get("status", {})),
        )


@dataclass
class WriteOutcome:
    accepted: bool
    new_resource_version: int | None = None
    conflict: bool = False


@dataclass(frozen=True)
class ChangeNotification:
    kind: str
    namespace: str
    name: str
    event_type: str  # Added | Modified | Deleted


@dataclass
class WatchHandle:
    kind: str
    subscriber: str
    callback: Callable[[ChangeNotification], None]
    seq: int


def labels_match(labels: dict[str, str], selector: dict[str, str]) -> bool:
    return all(labels.get(k) == v for k, v in selector.items())


class ResourceStore:
    """Compare-and-swap object map with spec/status separation and watches.

    `drop_filter` is the fault-injection hook: called per delivery attempt,
    returning True drops that notification for that subscriber. The stored
    state is never affected by drops.
    """

    def __init__(self, trace=None, now_ms: Callable[[], int] | None = None) -> None:
        self._objects: dict[tuple[str, str, str], Resource] = {}
        self._watches: list[WatchHandle] = []
        self._watch_seq = 0
        self._trace = trace
        self._now_ms = now_ms or (lambda: 0)
        self.write_count = 0
        self.drop_filter: Callable[[ChangeNotification, str], bool] | None = None
        self._actor = "client"

    @contextmanager
    def as_actor(self, actor: str) -> Iterator[None]:
        prev, self._actor = self._actor, actor
        try:
            yield
        finally:
            self._actor = prev

    # -- reads ------------------------------------------------------------

    def get(self, kind: str, namespace: str, name: str) -> Resource:
        obj = self._objects.get((kind, namespace, name))
        if obj is None:
            raise NotFoundError(kind, namespace, name)
        return copy.deepcopy(obj)

    def try_get(self, kind: str, namespace: str, name: str) -> Resource | None:
        obj = self._objects.get((kind, namespace, name))
        return copy.deepcopy(obj) if obj is not None else None

    def list(
        self,
        kind: str,
        namespace: str = DEFAULT_NAMESPACE,
        label_selector: dict[str, str] | None = None,
    ) -> list[Resource]:
        """All live resources of `kind` whose labels cover the selector, name-sorted."""
        selector = label_selector or {}
        out = [
            copy.deepcopy(obj)
            for (k, ns, _), obj in sorted(self._objects.items())
            if k == kind and ns == namespace and labels_match(obj.meta.labels, selector)
        ]
        return out

    # -- writes -----------------------------------------------------------

    def create(self, resource: Resource) -> WriteOutcome:
        key = resource.key
        if resource.kind not in KNOWN_KINDS:
            raise ValueError(f"unknown kind: {resource.kind!r}")
        if key in self._objects:
            raise AlreadyExistsError(f"{'/'.join(key)} already exists")
        stored = copy.deepcopy(resource)
        stored.meta.resource_version = 1
        stored.meta.generation = 1
        self._objects[key] = stored
        self._committed(stored, "Added", "create", spec=stored.spec, status=stored.status)
        return WriteOutcome(accepted=True, new_resource_version=1)

    def update_spec(self, resource: Resource, expected_version: int) -> WriteOutcome:
        return self._update(resource, expected_version, section="spec")

    def update_status(self, resource: Resource, expected_version: int) -> WriteOutcome:
        return self._update(resource, expected_version, section="status")

    def _update(self, resource: Resource, expected_version: int, section: str) -> WriteOutcome:
        key = resource.key
        stored = self._objects.get(key)
        if stored is None:
            raise NotFoundError(*key)
        if stored.meta.resource_version != expected_version:
            return WriteOutcome(accepted=False, conflict=True)
        if section == "spec":
            stored.spec = copy.deepcopy(resource.spec)
            stored.meta.labels = dict(resource.meta.labels)
            stored.meta.generation += 1
        else:
            stored.status = copy.deepcopy(resource.status)
        stored.meta.resource_version += 1
        detail = {section: copy.deepcopy(getattr(stored, section))}
        self._committed(stored, "Modified", f"update_{section}", **detail)
        return WriteOutcome(accepted=True, new_resource_version=stored.meta.resource_version)

    def delete(self, kind: str, namespace: str, name: str) -> None:
        key = (kind, namespace, name)
        stored = self._objects.pop(key, None)
        if stored is None:
            raise NotFoundError(kind, namespace, name)
        self._committed(stored, "Deleted", "delete")

    # -- watches ----------------------------------------------------------

    def subscribe(
        self, kind: str, callback: Callable[[ChangeNotification], None], subscriber: str
    ) -> WatchHandle:
        handle = WatchHandle(kind=kind, subscriber=subscriber, callback=callback, seq=self._watch_seq)
        self._watch_seq += 1
        self._watches.append(handle)
        return handle

    def unsubscribe(self, handle: WatchHandle) -> None:
        if handle in self._watches:
            self._watches.remove(handle)

    # -- internals ---------------------------------------------------------

    def _committed(self, stored: Resource, event_type: str, op: str, **sections: Any) -> None:
        self.write_count += 1
        if self._trace is not None:
            detail: dict[str, Any] = {
                "op": op,
                "kind": stored.kind,
                "namespace": stored.meta.namespace,
                "name": stored.meta.name,
                "resourceVersion": stored.meta.resource_version,
                "generation": stored.meta.generation,
                "actor": self._actor,
            }
            detail.update(sections)
            self._trace.emit(
                self._now_ms(), "store_write", f"{stored.kind}/{stored.meta.name}", detail
            )
        note = ChangeNotification(
            kind=stored.kind,
            namespace=stored.meta.namespace,
            name=stored.meta.name,
            event_type=event_type,
        )
        # Deliver to subscribers registered at commit time, in registration
        # order. The filter decides per (notification, subscriber) pair.
        for handle in list(self._watches):
            if handle.kind != note.kind:
                continue
            if self.drop_filter is not None and self.drop_filter(note, handle.subscriber):
                if self._trace is not None:
                    self._trace.emit(
                        self._now_ms(),
                        "watch_dropped",
                        f"{note.kind}/{note.name}",
                        {"subscriber": handle.subscriber, "eventType": note.event_type},
                    )
                continue
            handle.callback(note)
