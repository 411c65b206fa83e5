"""Scenario files: JSON documents checked against a bundled schema, then semantically."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema

from ..admin import Topology
from ..model import Endpoint, ModelError
from ..node import NodeConfig


class InvalidScenario(ValueError):
    """Carries one ``path: problem`` line per defect found."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = diagnostics
        super().__init__("invalid scenario:\n  " + "\n  ".join(diagnostics))


@dataclass(frozen=True)
class NodeSpec:
    endpoint: Endpoint
    capacity_score: float = 1.0
    base_cpu: float = 0.0
    base_ram: float = 0.0
    start: float = 0.0


@dataclass(frozen=True)
class TaskSpec:
    time: float
    node: Endpoint
    cpu_share: float
    ram_share: float
    duration: float


@dataclass(frozen=True)
class LookupSpec:
    time: float
    node: Endpoint
    service: str


@dataclass(frozen=True)
class ChurnSpec:
    time: float
    node: Endpoint
    event: str


@dataclass(frozen=True)
class NetSpec:
    latency_min: float = 0.01
    latency_max: float = 0.05
    drop_prob: float = 0.0
    # drops only happen before this time; None means for the whole run
    drop_until: float | None = None

    def drops_at(self, t: float) -> bool:
        return self.drop_prob > 0 and (self.drop_until is None or t < self.drop_until)


@dataclass(frozen=True)
class Scenario:
    seed: int
    nodes: tuple[NodeSpec, ...]
    topology: Topology
    hop_threshold: int
    horizon: float
    node_configs: dict[str, dict[str, Any]] = field(default_factory=dict)
    services: dict[Endpoint, frozenset[str]] = field(default_factory=dict)
    workload: tuple[TaskSpec, ...] = ()
    lookups: tuple[LookupSpec, ...] = ()
    churn: tuple[ChurnSpec, ...] = ()
    net: NetSpec = NetSpec()
    baseline: bool = False
    name: str = ""

    def config_for(self, ep: Endpoint) -> NodeConfig:
        merged = dict(self.node_configs.get("default", {}))
        merged.update(self.node_configs.get(str(ep), {}))
        return NodeConfig.from_dict(merged)

    def with_seed(self, seed: int) -> Scenario:
        return replace(self, seed=seed)

    def to_dict(self) -> dict[str, Any]:
        eps = [n.endpoint for n in self.nodes]
        hop = [[str(a), str(b), self.topology.hop(a, b)] for i, a in enumerate(eps) for b in eps[i + 1:]]
        out: dict[str, Any] = {
            "seed": self.seed,
            "horizon": self.horizon,
            "hop_threshold": self.hop_threshold,
            "topology": {
                "nodes": [
                    {"endpoint": str(n.endpoint), "capacity_score": n.capacity_score,
                     "base_load": [n.base_cpu, n.base_ram], "start": n.start}
                    for n in self.nodes
                ],
                "hop": hop,
            },
            "node_configs": self.node_configs,
            "services": {str(ep): sorted(s) for ep, s in sorted(self.services.items())},
            "workload": [
                {"time": w.time, "node": str(w.node),
                 "task": {"cpu_share": w.cpu_share, "ram_share": w.ram_share, "duration": w.duration}}
                for w in self.workload
            ],
            "lookups": [{"time": q.time, "node": str(q.node), "service": q.service} for q in self.lookups],
            "churn": [{"time": c.time, "node": str(c.node), "event": c.event} for c in self.churn],
            "net": {k: v for k, v in vars(self.net).items() if v is not None},
            "baseline": self.baseline,
        }
        if self.name:
            out["name"] = self.name
        return out


def _schema() -> dict:
    return json.loads(resources.files("pgrid.data").joinpath("scenario.schema.json").read_text())


def _path(err: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def parse_scenario(doc: Any) -> Scenario:
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: (_path(e), e.message))
    if errors:
        raise InvalidScenario([f"{_path(e)}: {e.message}" for e in errors])

    diags: list[str] = []

    def ep(text: str, where: str) -> Endpoint | None:
        try:
            return Endpoint.parse(text)
        except ModelError as exc:
            diags.append(f"{where}: {exc}")
            return None

    topo = doc["topology"]
    nodes: list[NodeSpec] = []
    for i, n in enumerate(topo["nodes"]):
        e = ep(n["endpoint"], f"topology/nodes/{i}/endpoint")
        if e is None:
            continue
        cpu, ram = n.get("base_load", [0.0, 0.0])
        nodes.append(NodeSpec(e, float(n.get("capacity_score", 1.0)), float(cpu), float(ram), float(n.get("start", 0.0))))
    known = {n.endpoint for n in nodes}
    if len(known) != len(nodes):
        diags.append("topology/nodes: duplicate endpoint")

    def member(text: str, where: str) -> Endpoint | None:
        e = ep(text, where)
        if e is not None and e not in known:
            diags.append(f"{where}: {text} is not a topology node")
            return None
        return e

    triples = []
    for i, (a, b, h) in enumerate(topo.get("hop", [])):
        ea, eb = member(a, f"topology/hop/{i}/0"), member(b, f"topology/hop/{i}/1")
        if ea is not None and eb is not None:
            triples.append((ea, eb, h))

    horizon = float(doc["horizon"])

    def timed(key, build):
        out = []
        for i, item in enumerate(doc.get(key, [])):
            where = f"{key}/{i}"
            if item["time"] > horizon:
                diags.append(f"{where}/time: {item['time']} is beyond horizon {horizon}")
            node = member(item["node"], f"{where}/node")
            if node is not None:
                out.append(build(item, node))
        return tuple(out)

    workload = timed("workload", lambda w, n: TaskSpec(
        float(w["time"]), n, float(w["task"]["cpu_share"]), float(w["task"]["ram_share"]), float(w["task"]["duration"])))
    lookups = timed("lookups", lambda q, n: LookupSpec(float(q["time"]), n, q["service"]))
    churn = timed("churn", lambda c, n: ChurnSpec(float(c["time"]), n, c["event"]))

    services: dict[Endpoint, frozenset[str]] = {}
    for text, names in doc.get("services", {}).items():
        e = member(text, f"services/{text}")
        if e is not None:
            services[e] = frozenset(names)

    configs = doc.get("node_configs", {})
    for key, cfg in configs.items():
        if key != "default":
            member(key, f"node_configs/{key}")
        try:
            NodeConfig.from_dict(cfg)
        except (TypeError, ValueError) as exc:
            diags.append(f"node_configs/{key}: {exc}")

    raw_net = doc.get("net", {})
    net = NetSpec(**{k: float(v) for k, v in raw_net.items()})
    if net.latency_min > net.latency_max:
        diags.append("net: latency_min exceeds latency_max")

    topology = None
    if not diags:
        try:
            topology = Topology.from_triples([n.endpoint for n in nodes], triples, topo.get("default_hop"))
        except ModelError as exc:
            diags.append(f"topology/hop: {exc}")
    if diags:
        raise InvalidScenario(diags)
    return Scenario(
        seed=doc["seed"],
        nodes=tuple(nodes),
        topology=topology,
        hop_threshold=doc["hop_threshold"],
        horizon=horizon,
        node_configs=configs,
        services=services,
        workload=workload,
        lookups=lookups,
        churn=churn,
        net=net,
        baseline=doc.get("baseline", False),
        name=doc.get("name", ""),
    )


def load_scenario(path: str | Path) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InvalidScenario([f"{path}: no such file"]) from None
    except (OSError, UnicodeDecodeError) as exc:
        raise InvalidScenario([f"{path}: {exc}"]) from None
    except json.JSONDecodeError as exc:
        raise InvalidScenario([f"{path}: not JSON ({exc})"]) from None
    return parse_scenario(doc)


def bundled(name: str) -> Scenario:
    """Load a scenario shipped inside the package, e.g. ``bundled("paper-sec3")``."""
    text = resources.files("pgrid.data").joinpath(f"{name}.json").read_text()
    return parse_scenario(json.loads(text))
