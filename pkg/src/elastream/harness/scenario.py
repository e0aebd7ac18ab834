"""Scenario files: YAML documents describing a pipeline run.

Example::

    name: smart-grid
    seed: 7
    steps: 1000
    sync_window: 16
    nodes: [1, 2, 3, 4, 5, 6]
    enclave: {mode: off, budget_bytes: 1048576, page_size: 4096}
    workload:
      plugs: 10
      sources: [{id: 1, node: 1}, {id: 2, node: 2}]
      anomalies: [{plug: 3, start: 40, length: 8, factor: 6.0}]
    operators:
      - {id: 1, name: forecast, logic: forecast, inputs: [sources], placement: [3]}
    sink: {node: 6, inputs: [forecast]}
    links:
      default: {delay: "uniform(1,4)"}
      overrides: [{from: 1, to: 3, delay: "fixed(2)", duplicate_prob: 0.0}]
    migrations:
      - {at: 400, op: forecast, partition: 0, target: 5}

Every validation failure raises :class:`ConfigError` naming the field path
and, when loaded from text, the line it came from.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from ..enclave_sim import EPC_BYTES, EPC_PAGE_SIZE, measure
from ..event_core import SourceId
from ..migration import DEFAULT_SYNC_WINDOW
from ..operator_runtime import (
    DEFAULT_FANOUT_BITS,
    OperatorDescriptor,
    UnknownLogic,
    output_stream_id,
    resolve_logic,
)
from ..simnet import Delay, LinkConfig
from ..workloads import AnomalyBurst, DEFAULT_KEY_PREFIX, generate_plugs


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = "", line: int | None = None):
        self.path = path
        self.line = line
        where = path or "<scenario>"
        if line is not None:
            where = f"line {line}: {where}"
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class SourceSpec:
    source_id: SourceId
    node: int


@dataclass(frozen=True)
class MigrationSpec:
    at: int
    op_id: int
    partition: int
    target: int


@dataclass
class EnclaveSpec:
    enabled: bool = False
    budget_bytes: int = EPC_BYTES
    page_size: int = EPC_PAGE_SIZE
    secret: str | None = None
    expected_measurements: dict[str, str] = field(default_factory=dict)

    def secret_bytes(self, seed: int) -> bytes:
        if self.secret:
            return bytes.fromhex(self.secret)
        return hashlib.sha256(f"elastream-provisioning:{seed}".encode()).digest()


@dataclass
class WorkloadSpec:
    plugs: int = 10
    slots: int = 96
    noise: float = 0.1
    watermark_every: int = 10
    key_prefix: str = DEFAULT_KEY_PREFIX
    anomalies: list[AnomalyBurst] = field(default_factory=list)


@dataclass
class Scenario:
    name: str
    seed: int
    steps: int
    nodes: frozenset[int]
    sources: list[SourceSpec]
    operators: list[OperatorDescriptor]
    op_inputs: dict[int, list[str]]
    placement: dict[int, list[int]]
    sink_node: int
    sink_inputs: frozenset[int]
    workload: WorkloadSpec
    enclave: EnclaveSpec = field(default_factory=EnclaveSpec)
    links: list[LinkConfig] = field(default_factory=list)
    default_link: LinkConfig | None = None
    migrations: list[MigrationSpec] = field(default_factory=list)
    sync_window: int = DEFAULT_SYNC_WINDOW
    fanout_bits: int = DEFAULT_FANOUT_BITS
    stall_limit: int | None = 5000
    down_nodes: frozenset[int] = frozenset()

    # -- topology lookups ----------------------------------------------
    def operator(self, op_id: int) -> OperatorDescriptor:
        for op in self.operators:
            if op.op_id == op_id:
                return op
        raise KeyError(op_id)

    def operator_by_name(self, name: str) -> OperatorDescriptor:
        for op in self.operators:
            if op.name == name:
                return op
        raise KeyError(name)

    def input_streams(self, op: OperatorDescriptor) -> frozenset[SourceId]:
        streams: set[SourceId] = set()
        for name in self.op_inputs[op.op_id]:
            if name == "sources":
                streams.update(s.source_id for s in self.sources)
            else:
                upstream = self.operator_by_name(name)
                streams.update(output_stream_id(upstream.op_id, p) for p in range(upstream.parallelism))
        return frozenset(streams)

    def source_consumers(self, source_id: SourceId) -> list[int]:
        return [op.op_id for op in self.operators if "sources" in self.op_inputs[op.op_id]]

    def op_consumers(self, op_id: int) -> list[int]:
        name = self.operator(op_id).name
        return [op.op_id for op in self.operators if name in self.op_inputs[op.op_id]]

    def sink_streams(self) -> frozenset[SourceId]:
        return frozenset(
            output_stream_id(op_id, p)
            for op_id in self.sink_inputs
            for p in range(self.operator(op_id).parallelism)
        )

    def topological_operators(self) -> list[OperatorDescriptor]:
        done: list[OperatorDescriptor] = []
        seen: set[int] = set()
        remaining = list(self.operators)
        while remaining:
            progressed = False
            for op in list(remaining):
                ups = [n for n in self.op_inputs[op.op_id] if n != "sources"]
                if all(self.operator_by_name(n).op_id in seen for n in ups):
                    done.append(op)
                    seen.add(op.op_id)
                    remaining.remove(op)
                    progressed = True
            if not progressed:
                raise ConfigError("operator inputs form a cycle", "operators")
        return done

    def depth(self, op_id: int) -> int:
        ups = [n for n in self.op_inputs[op_id] if n != "sources"]
        if not ups:
            return 1
        return 1 + max(self.depth(self.operator_by_name(n).op_id) for n in ups)

    def expected_measurement(self, op: OperatorDescriptor) -> bytes:
        override = self.enclave.expected_measurements.get(op.name)
        if override is not None:
            return bytes.fromhex(override)
        return measure(resolve_logic(op.logic_id).code_identity(), op.params)

    # -- workload ---------------------------------------------------------
    def generate(self):
        w = self.workload
        return generate_plugs(
            self.seed, w.plugs, self.steps, w.anomalies, sources=len(self.sources),
            slots=w.slots, watermark_every=w.watermark_every, noise=w.noise,
            first_source=min(s.source_id for s in self.sources), key_prefix=w.key_prefix,
        )

    def with_changes(self, **changes: Any) -> Scenario:
        return replace(copy.deepcopy(self), **changes)


class _Lines:
    """Maps dotted field paths to the YAML line they were read from."""

    def __init__(self, text: str | None):
        self.lines: dict[str, int] = {}
        if text:
            try:
                node = yaml.compose(text)
            except yaml.YAMLError:
                node = None
            if node is not None:
                self._walk(node, "")

    def _walk(self, node: yaml.Node, path: str) -> None:
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                self.lines[f"{path}.{key.value}".lstrip(".")] = key.start_mark.line + 1
                self._walk(value, f"{path}.{key.value}".lstrip("."))
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                self._walk(item, f"{path}[{i}]")

    def of(self, path: str) -> int | None:
        while path:
            if path in self.lines:
                return self.lines[path]
            cut = max(path.rfind("."), path.rfind("["))
            path = path[:cut] if cut > 0 else ""
        return None


class _Reader:
    def __init__(self, lines: _Lines):
        self.lines = lines

    def fail(self, path: str, message: str) -> ConfigError:
        return ConfigError(message, path, self.lines.of(path))

    def get(self, doc: dict, key: str, path: str, kind: type | tuple, default: Any = ...) -> Any:
        full = f"{path}.{key}".lstrip(".")
        if not isinstance(doc, dict):
            raise self.fail(path, "expected a mapping")
        if key not in doc or doc[key] is None:
            if default is ...:
                raise self.fail(full, "required field is missing")
            return default
        value = doc[key]
        if kind is int and isinstance(value, bool):
            raise self.fail(full, "expected an integer")
        if not isinstance(value, kind):
            names = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
            raise self.fail(full, f"expected {names}, got {type(value).__name__}")
        return value

    def positive(self, doc: dict, key: str, path: str, default: Any = ...) -> int:
        value = self.get(doc, key, path, int, default)
        if value < 1:
            raise self.fail(f"{path}.{key}".lstrip("."), "must be a positive integer")
        return value


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario: {exc}") from exc
    return parse_scenario(text)


def parse_scenario(text: str) -> Scenario:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {exc}", line=mark.line + 1 if mark else None) from exc
    return scenario_from_dict(doc, _Lines(text))


def scenario_from_dict(doc: Any, lines: _Lines | None = None) -> Scenario:
    r = _Reader(lines or _Lines(None))
    if not isinstance(doc, dict):
        raise r.fail("", "scenario must be a mapping")
    known = {"name", "seed", "steps", "nodes", "down_nodes", "enclave", "workload", "operators",
             "sink", "links", "migrations", "sync_window", "fanout_bits", "stall_limit"}
    for key in doc:
        if key not in known:
            raise r.fail(str(key), "unknown field")

    name = r.get(doc, "name", "", str, "scenario")
    seed = r.get(doc, "seed", "", int, 0)
    steps = r.positive(doc, "steps", "")
    nodes_raw = r.get(doc, "nodes", "", list)
    if not all(isinstance(n, int) and not isinstance(n, bool) for n in nodes_raw):
        raise r.fail("nodes", "node ids must be integers")
    nodes = frozenset(nodes_raw)
    if len(nodes) != len(nodes_raw):
        raise r.fail("nodes", "duplicate node id")
    down = frozenset(r.get(doc, "down_nodes", "", list, []))
    sync_window = r.positive(doc, "sync_window", "", DEFAULT_SYNC_WINDOW)
    fanout_bits = r.positive(doc, "fanout_bits", "", DEFAULT_FANOUT_BITS)
    if fanout_bits > 16:
        raise r.fail("fanout_bits", "at most 16 bits fit beside 48-bit input timestamps")
    stall_limit = r.get(doc, "stall_limit", "", int, 5000)

    def need_node(value: Any, path: str) -> int:
        if not isinstance(value, int) or isinstance(value, bool) or value not in nodes:
            raise r.fail(path, f"unknown node {value!r}")
        return value

    # enclave
    enc_doc = r.get(doc, "enclave", "", dict, {})
    mode = enc_doc.get("mode", "off")
    if mode in (True, False):
        mode = "on" if mode else "off"
    if mode not in ("on", "off"):
        raise r.fail("enclave.mode", "must be 'on' or 'off'")
    enclave = EnclaveSpec(
        enabled=mode == "on",
        budget_bytes=r.positive(enc_doc, "budget_bytes", "enclave", EPC_BYTES),
        page_size=r.positive(enc_doc, "page_size", "enclave", EPC_PAGE_SIZE),
        secret=r.get(enc_doc, "secret", "enclave", str, None),
        expected_measurements=dict(r.get(enc_doc, "expected_measurements", "enclave", dict, {})),
    )
    if enclave.secret is not None:
        try:
            if len(bytes.fromhex(enclave.secret)) != 32:
                raise ValueError
        except ValueError:
            raise r.fail("enclave.secret", "must be 64 hex characters") from None

    # workload
    w_doc = r.get(doc, "workload", "", dict)
    src_list = r.get(w_doc, "sources", "workload", list)
    if not src_list:
        raise r.fail("workload.sources", "at least one source is required")
    sources = []
    for i, item in enumerate(src_list):
        p = f"workload.sources[{i}]"
        sid = r.positive(item, "id", p)
        if sid >= 1 << 32:
            raise r.fail(f"{p}.id", "source ids must be below 2^32")
        sources.append(SourceSpec(sid, need_node(r.get(item, "node", p, int), f"{p}.node")))
    ids = [s.source_id for s in sources]
    if len(set(ids)) != len(ids):
        raise r.fail("workload.sources", "duplicate source id")
    if ids != list(range(ids[0], ids[0] + len(ids))):
        raise r.fail("workload.sources", "source ids must be consecutive and ascending")
    anomalies = []
    for i, item in enumerate(r.get(w_doc, "anomalies", "workload", list, [])):
        p = f"workload.anomalies[{i}]"
        anomalies.append(AnomalyBurst(
            plug=r.get(item, "plug", p, int), start=r.get(item, "start", p, int),
            length=r.positive(item, "length", p), factor=float(r.get(item, "factor", p, (int, float))),
        ))
    workload = WorkloadSpec(
        plugs=r.positive(w_doc, "plugs", "workload", 10),
        slots=r.positive(w_doc, "slots", "workload", 96),
        noise=float(r.get(w_doc, "noise", "workload", (int, float), 0.1)),
        watermark_every=r.positive(w_doc, "watermark_every", "workload", 10),
        key_prefix=r.get(w_doc, "key_prefix", "workload", str, DEFAULT_KEY_PREFIX),
        anomalies=anomalies,
    )
    if not 0 <= workload.noise <= 1:
        raise r.fail("workload.noise", "must lie within [0, 1]")

    # operators
    operators: list[OperatorDescriptor] = []
    op_inputs: dict[int, list[str]] = {}
    placement: dict[int, list[int]] = {}
    op_list = r.get(doc, "operators", "", list)
    names: set[str] = set()
    for i, item in enumerate(op_list):
        p = f"operators[{i}]"
        op_id = r.get(item, "id", p, int)
        if not 0 <= op_id < 1 << 20:
            raise r.fail(f"{p}.id", "operator ids must lie in [0, 2^20)")
        op_name = r.get(item, "name", p, str)
        if op_name in names or op_name == "sources":
            raise r.fail(f"{p}.name", f"duplicate or reserved operator name {op_name!r}")
        names.add(op_name)
        logic_id = r.get(item, "logic", p, str)
        try:
            logic_cls = resolve_logic(logic_id)
        except UnknownLogic as exc:
            raise r.fail(f"{p}.logic", str(exc)) from None
        parallelism = r.positive(item, "parallelism", p, 1)
        params = {str(k): str(v) for k, v in r.get(item, "params", p, dict, {}).items()}
        commutative = r.get(item, "commutative", p, bool, False)
        if commutative and not logic_cls.commutative:
            raise r.fail(f"{p}.commutative", f"logic {logic_id!r} is not commutative")
        try:
            logic_cls(params)
        except (ValueError, TypeError) as exc:
            raise r.fail(f"{p}.params", str(exc)) from None
        if any(op.op_id == op_id for op in operators):
            raise r.fail(f"{p}.id", f"duplicate operator id {op_id}")
        descriptor = OperatorDescriptor(op_id, op_name, logic_id, parallelism, commutative, params)
        operators.append(descriptor)
        inputs = r.get(item, "inputs", p, list, ["sources"])
        op_inputs[op_id] = [str(x) for x in inputs]
        places = r.get(item, "placement", p, list)
        if len(places) != parallelism:
            raise r.fail(f"{p}.placement", f"needs one node per partition ({parallelism})")
        placement[op_id] = [need_node(n, f"{p}.placement[{j}]") for j, n in enumerate(places)]
    for i, op in enumerate(operators):
        for name_ in op_inputs[op.op_id]:
            if name_ != "sources" and name_ not in names:
                raise r.fail(f"operators[{i}].inputs", f"unknown input {name_!r}")
    for i, op in enumerate(operators):
        if op.commutative:
            if any(op.name in ins for ins in op_inputs.values()):
                raise r.fail(f"operators[{i}].commutative",
                             "relaxed-order operators cannot feed other operators")

    sink_doc = r.get(doc, "sink", "", dict)
    sink_node = need_node(r.get(sink_doc, "node", "sink", int), "sink.node")
    sink_inputs = []
    for j, name_ in enumerate(r.get(sink_doc, "inputs", "sink", list)):
        if name_ not in names:
            raise r.fail(f"sink.inputs[{j}]", f"unknown operator {name_!r}")
        op = next(o for o in operators if o.name == name_)
        if op.commutative:
            raise r.fail(f"sink.inputs[{j}]", "relaxed-order operators cannot feed the sink")
        sink_inputs.append(op.op_id)

    # links
    links_doc = r.get(doc, "links", "", dict, {})
    default_link = None
    if "default" in links_doc:
        d = r.get(links_doc, "default", "links", dict)
        default_link = _link(r, d, "links.default", 0, 0)
    links = []
    for i, item in enumerate(r.get(links_doc, "overrides", "links", list, [])):
        p = f"links.overrides[{i}]"
        src = need_node(r.get(item, "from", p, int), f"{p}.from")
        dst = need_node(r.get(item, "to", p, int), f"{p}.to")
        links.append(_link(r, item, p, src, dst))

    migrations = []
    for i, item in enumerate(r.get(doc, "migrations", "", list, [])):
        p = f"migrations[{i}]"
        at = r.get(item, "at", p, int)
        if not 0 <= at <= steps:
            raise r.fail(f"{p}.at", f"trigger {at} outside the run (0..{steps})")
        op_ref = r.get(item, "op", p, (str, int))
        op = next((o for o in operators if o.name == op_ref or o.op_id == op_ref), None)
        if op is None:
            raise r.fail(f"{p}.op", f"unknown operator {op_ref!r}")
        part = r.get(item, "partition", p, int, 0)
        if not 0 <= part < op.parallelism:
            raise r.fail(f"{p}.partition", f"operator {op.name} has {op.parallelism} partitions")
        target = r.get(item, "target", p, int)
        if target not in nodes:
            raise r.fail(f"{p}.target", f"unknown node {target!r}")
        migrations.append(MigrationSpec(at, op.op_id, part, target))

    scenario = Scenario(
        name=name, seed=seed, steps=steps, nodes=nodes, sources=sources, operators=operators,
        op_inputs=op_inputs, placement=placement, sink_node=sink_node,
        sink_inputs=frozenset(sink_inputs), workload=workload, enclave=enclave, links=links,
        default_link=default_link, migrations=migrations, sync_window=sync_window,
        fanout_bits=fanout_bits, stall_limit=stall_limit, down_nodes=down,
    )
    scenario.topological_operators()
    return scenario


def _link(r: _Reader, doc: dict, path: str, src: int, dst: int) -> LinkConfig:
    try:
        delay = Delay.parse(doc.get("delay", 0))
    except (ValueError, KeyError) as exc:
        raise r.fail(f"{path}.delay", str(exc)) from None
    prob = r.get(doc, "duplicate_prob", path, (int, float), 0.0)
    if not 0 <= prob <= 1:
        raise r.fail(f"{path}.duplicate_prob", "must lie within [0, 1]")
    return LinkConfig(src, dst, delay, float(prob))
