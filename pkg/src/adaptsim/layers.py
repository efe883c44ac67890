"""Context-oriented behavioral variation scoped to individual requests.

Customization properties ride on connectors and are stamped into request
headers by a client-side interceptor; a server-side interceptor interprets
them (and any propagated layer identifiers) into the request's active
layer set. A layer-aware dispatcher then runs the highest-precedence
variant of each operation, with proceed-style chaining down to the base
behavior. Listener capture pins a layer set at registration time so
asynchronous callbacks keep their original activation.

Contexts are immutable values; the variant registry is written once at
scenario load. Activation here is strictly per-request — fleet-wide mode
changes are the operators' job, and a request-level low-power layer on an
already-low pod is a no-op by design.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Protocol

from .cluster import SimRequest

PROP_HEADER_PREFIX = "x-ctx-prop-"
LAYER_HEADER = "x-ctx-layer"

LayerSet = tuple[str, ...]

Variant = Callable[["RequestContext", Any, Callable[[], Any]], Any]


class HasProperties(Protocol):
    id: str
    properties: Mapping[str, str]


def make_layer_set(ids: list[str] | tuple[str, ...]) -> LayerSet:
    """Ordered, duplicate-free; activation order determines precedence."""
    seen: dict[str, None] = {}
    for layer_id in ids:
        seen.setdefault(layer_id, None)
    return tuple(seen)


@dataclass(frozen=True)
class RequestContext:
    request_id: str
    active_layers: LayerSet = ()
    customization_props: tuple[tuple[str, str], ...] = ()
    origin_connector: str = ""

    @property
    def props(self) -> dict[str, str]:
        return dict(self.customization_props)


@dataclass(frozen=True)
class CapturedListener:
    listener_id: str
    captured_layers: LayerSet


class UnknownOperationError(KeyError):
    pass


class VariantRegistry:
    """Base behaviors plus optional per-layer overrides for each operation."""

    def __init__(self) -> None:
        self._base: dict[str, Variant] = {}
        self._overrides: dict[tuple[str, str], Variant] = {}
        self.known_layers: set[str] = set()

    def register_base(self, operation: str, variant: Variant) -> None:
        self._base[operation] = variant

    def register_layer(self, operation: str, layer_id: str, variant: Variant) -> None:
        self._overrides[(operation, layer_id)] = variant
        self.known_layers.add(layer_id)

    def declare_layer(self, layer_id: str) -> None:
        self.known_layers.add(layer_id)

    def base(self, operation: str) -> Variant:
        if operation not in self._base:
            raise UnknownOperationError(operation)
        return self._base[operation]

    def override(self, operation: str, layer_id: str) -> Variant | None:
        return self._overrides.get((operation, layer_id))


def client_intercept(connector: HasProperties, request: SimRequest) -> SimRequest:
    """Stamp the connector's customization properties into a copy of the
    request's headers; the original request is left untouched."""
    headers = dict(request.headers)
    for key in sorted(connector.properties):
        headers[PROP_HEADER_PREFIX + key] = connector.properties[key]
    return replace(request, headers=headers)


def server_intercept(
    request: SimRequest,
    interpretation_rules: list[dict[str, str]],
    registry: VariantRegistry,
    origin_connector: str = "",
    warn: Callable[[str], None] | None = None,
) -> RequestContext:
    """Build the request's context from propagated identifiers plus this
    service's own interpretation of the customization properties.

    Identifiers naming layers this service does not know are ignored (with
    a warning): collaborating services need not share every layer.
    """
    props: dict[str, str] = {}
    for header, value in request.headers.items():
        if header.startswith(PROP_HEADER_PREFIX):
            props[header[len(PROP_HEADER_PREFIX):]] = value

    activated: list[str] = []
    propagated = request.headers.get(LAYER_HEADER, "")
    if propagated:
        for layer_id in propagated.split(","):
            if layer_id in registry.known_layers:
                activated.append(layer_id)
            elif warn is not None:
                warn(layer_id)
    for rule in interpretation_rules:
        if props.get(rule["prop"]) == rule["value"]:
            activated.append(rule["layer"])

    return RequestContext(
        request_id=request.request_id,
        active_layers=make_layer_set(activated),
        customization_props=tuple(sorted(props.items())),
        origin_connector=origin_connector,
    )


def dispatch(
    registry: VariantRegistry,
    context: RequestContext,
    operation: str,
    payload: Any,
    on_variant: Callable[[str], None] | None = None,
) -> Any:
    """Run the operation under the context's layers, last activated first,
    each variant able to proceed to the next one down, ending at base."""
    chain: list[tuple[str, Variant]] = [("base", registry.base(operation))]
    for layer_id in context.active_layers:
        variant = registry.override(operation, layer_id)
        if variant is not None:
            chain.append((layer_id, variant))

    def run(index: int) -> Any:
        label, variant = chain[index]
        if on_variant is not None:
            on_variant(label)
        return variant(context, payload, lambda: run(index - 1) if index > 0 else None)

    return run(len(chain) - 1)


def propagate(context: RequestContext, downstream: SimRequest, mode: str = "forward") -> SimRequest:
    """Forward context onto a downstream request.

    `forward` carries both customization properties and layer identifiers;
    `propsOnly` carries just the properties, leaving each hop to
    re-interpret them with its own rules.
    """
    if mode not in ("forward", "propsOnly"):
        raise ValueError(f"unknown propagation mode: {mode!r}")
    headers = dict(downstream.headers)
    for key, value in context.customization_props:
        headers[PROP_HEADER_PREFIX + key] = value
    if mode == "forward" and context.active_layers:
        headers[LAYER_HEADER] = ",".join(context.active_layers)
    return replace(downstream, headers=headers)


def capture_listener(listener_id: str, context: RequestContext) -> CapturedListener:
    return CapturedListener(listener_id=listener_id, captured_layers=context.active_layers)


def dispatch_callback(
    registry: VariantRegistry,
    listener: CapturedListener,
    operation: str,
    payload: Any,
    on_variant: Callable[[str], None] | None = None,
) -> Any:
    """Exactly `dispatch`, but under the layers captured at registration,
    regardless of whatever context the callback is delivered from."""
    context = RequestContext(
        request_id=f"cb:{listener.listener_id}", active_layers=listener.captured_layers
    )
    return dispatch(registry, context, operation, payload, on_variant=on_variant)
