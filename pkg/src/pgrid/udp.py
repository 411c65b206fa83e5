"""Running a node, the bootstrap admin and lookups over real UDP sockets.

A node binds four consecutive ports (load, leader, balance, service).  One
reader thread multiplexes them and pushes decoded messages onto a queue; a
single loop drains that queue and the timer heap, so node handlers never run
concurrently.  Timers are wall-clock seconds.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import os
import queue
import selectors
import socket
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .admin import Admin, DuplicateEndpoint, Topology, UnknownNode
from .balancer import MigrationExecutor, NoopExecutor, TaskInfo, execute_migration
from .effects import Decided, Note, Resolved, Send, StartTimer, StopTimer
from .model import Endpoint, LoadSample, MembershipTables, ModelError, NodeInfo
from .node import LoadProbe, Node, NodeConfig
from .protocol import (
    AdminJoin,
    AdminNak,
    AdminTables,
    Lookup,
    LookupResult,
    MalformedMessage,
    MemberNotice,
    Message,
    Outcome,
    PortClass,
    decode,
    encode,
)

log = logging.getLogger("pgrid")

SOCKET_CLASSES = (PortClass.LOAD, PortClass.LEADER, PortClass.BALANCE, PortClass.SERVICE)


class BindFailed(OSError):
    def __init__(self, port: int, reason: str):
        self.port = port
        super().__init__(f"cannot bind port {port}: {reason}")


class JoinFailed(RuntimeError):
    pass


class JsonLines(logging.Formatter):
    """Every record becomes one JSON object; plain log calls get ``event: "log"``."""

    def format(self, record: logging.LogRecord) -> str:
        fields = getattr(record, "fields", None)
        if fields is None:
            fields = {"ts": round(record.created, 3), "event": "log", "level": record.levelname.lower(),
                      "logger": record.name, "message": record.getMessage()}
            if record.exc_info:
                fields["error"] = self.formatException(record.exc_info)
        return json.dumps(fields, sort_keys=True, default=str)


def emit(event: str, **fields: Any):
    log.info(event, extra={"fields": {"ts": round(time.time(), 3), "event": event, **fields}})


def setup_logging(stream=None):
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(JsonLines())
    log.handlers[:] = [handler]
    log.setLevel(logging.INFO)
    log.propagate = False


@dataclass(frozen=True)
class PortMap:
    base_port: int

    def __post_init__(self):
        if not 1 <= self.base_port <= 65535 - 3:
            raise ValueError(f"base port {self.base_port} leaves no room for four ports")

    def port(self, cls: PortClass) -> int:
        return self.base_port + int(cls)


def destination(dest: Endpoint, m: Message) -> tuple[str, int]:
    """Where a message for ``dest`` goes: base port plus the class offset, or the exact port."""
    cls = type(m).PORT
    port = dest.port if cls is PortClass.DIRECT else dest.port + int(cls)
    return dest.address, port


class UdpTransport:
    """Four bound datagram sockets feeding one queue."""

    def __init__(self, listen: Endpoint, inbox: queue.Queue):
        self.listen = listen
        self.ports = PortMap(listen.port)
        self.inbox = inbox
        self.counters: dict[str, int] = {"malformed": 0, "port_mismatch": 0, "send_errors": 0}
        self.socks: dict[PortClass, socket.socket] = {}
        try:
            for cls in SOCKET_CLASSES:
                s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
                try:
                    s.bind((listen.address, self.ports.port(cls)))
                except OSError as exc:
                    s.close()
                    raise BindFailed(self.ports.port(cls), exc.strerror or str(exc)) from exc
                s.setblocking(False)
                self.socks[cls] = s
        except BindFailed:
            self.close()
            raise
        self._sel = selectors.DefaultSelector()
        for cls, s in self.socks.items():
            self._sel.register(s, selectors.EVENT_READ, cls)
        self._stop = threading.Event()
        self._reader = threading.Thread(target=self._read_loop, name=f"udp-{listen}", daemon=True)

    def start(self):
        self._reader.start()

    def send(self, dest: Endpoint, m: Message):
        data = encode(m)  # oversize raises before anything leaves
        cls = type(m).PORT
        sock = self.socks[cls if cls is not PortClass.DIRECT else PortClass.SERVICE]
        try:
            sock.sendto(data, destination(dest, m))
        except OSError as exc:
            self.counters["send_errors"] += 1
            emit("send_error", dest=str(dest), type=m.TOKEN, error=str(exc))

    def _read_loop(self):
        while not self._stop.is_set():
            for key, _ in self._sel.select(timeout=0.2):
                cls: PortClass = key.data
                try:
                    data, addr = key.fileobj.recvfrom(65535)
                except (BlockingIOError, OSError):
                    continue
                try:
                    m = decode(data)
                except MalformedMessage:
                    self.counters["malformed"] += 1
                    continue
                if type(m).PORT is not cls:
                    self.counters["port_mismatch"] += 1
                    continue
                self.inbox.put(("msg", m, addr))

    def close(self):
        if hasattr(self, "_stop"):
            self._stop.set()
            if self._reader.is_alive():
                self._reader.join(timeout=1)
            self._sel.close()
        for s in self.socks.values():
            s.close()


# -- load probes ------------------------------------------------------------------


class FileProbe:
    """Reads ``{"cpu": .., "ram": .., "tasks": [{"id", "cpu", "ram"}]}``; a missing file reads as idle."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def _doc(self) -> dict:
        try:
            return json.loads(self.path.read_text())
        except (OSError, ValueError):
            return {}

    def sample(self, now: float) -> LoadSample:
        d = self._doc()
        clip = lambda v: min(1.0, max(0.0, float(v)))  # noqa: E731
        return LoadSample(clip(d.get("cpu", 0.0)), clip(d.get("ram", 0.0)), now)

    def tasks(self) -> list[TaskInfo]:
        return [TaskInfo(str(t["id"]), float(t.get("cpu", 0)), float(t.get("ram", 0))) for t in self._doc().get("tasks", [])]


class PsutilProbe:
    """Host-wide cpu and memory utilization; reports no migratable tasks."""

    def __init__(self):
        import psutil

        self._psutil = psutil
        psutil.cpu_percent(interval=None)

    def sample(self, now: float) -> LoadSample:
        cpu = self._psutil.cpu_percent(interval=None) / 100.0
        ram = self._psutil.virtual_memory().percent / 100.0
        return LoadSample(min(1.0, cpu), min(1.0, ram), now)

    def tasks(self) -> list[TaskInfo]:
        return []


# -- joining -----------------------------------------------------------------------------


def request_join(admin: Endpoint, node: Endpoint, score: float, timeout: float = 2.0, attempts: int = 5) -> MembershipTables:
    """Ask the admin for this node's tables over a throwaway socket, retrying on silence."""
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.bind((node.address, 0))
        s.settimeout(timeout)
        req = encode(AdminJoin(node, score))
        for _ in range(attempts):
            s.sendto(req, (admin.address, admin.port))
            deadline = time.monotonic() + timeout
            while time.monotonic() < deadline:
                try:
                    data, _ = s.recvfrom(65535)
                except socket.timeout:
                    break
                except OSError:  # e.g. ICMP port unreachable while the admin is not up yet
                    time.sleep(min(timeout, 0.5))
                    break
                try:
                    m = decode(data)
                except MalformedMessage:
                    continue
                if isinstance(m, AdminNak) and m.node == node:
                    raise JoinFailed(f"admin refused {node}: {m.reason}")
                if isinstance(m, AdminTables) and m.node == node:
                    return MembershipTables(node, m.domain, set(m.members), {d: set(eps) for d, eps in m.external})
    raise JoinFailed(f"no answer from admin {admin}")


# -- node daemon ---------------------------------------------------------------------------


class NodeDaemon:
    def __init__(
        self,
        listen: Endpoint,
        admin: Endpoint,
        services=(),
        seed: Any = 0,
        config: NodeConfig | None = None,
        probe: LoadProbe | None = None,
        executor: MigrationExecutor | None = None,
        score: float = 1.0,
    ):
        self.listen = listen
        self.admin = admin
        self.services = tuple(services)
        self.seed = seed
        self.config = config or NodeConfig()
        self.probe = probe
        self.executor = executor or NoopExecutor()
        self.score = score
        self.inbox: queue.Queue = queue.Queue()
        self.transport: UdpTransport | None = None
        self.node: Node | None = None
        self._timers: list[tuple[float, int, str, int]] = []
        self._gen: dict[str, int] = {}
        self._seq = itertools.count()
        self._t0 = time.monotonic()
        self._stop = threading.Event()
        self._lookups: dict[int, tuple[Endpoint, int]] = {}
        self._services_seen: dict = {}

    def now(self) -> float:
        return time.monotonic() - self._t0

    def start(self):
        # bind first so membership notices sent right after admission are not lost
        self.transport = UdpTransport(self.listen, self.inbox)
        self.transport.start()
        try:
            tables = request_join(self.admin, self.listen, self.score)
        except Exception:
            self.transport.close()
            raise
        info = NodeInfo(self.listen, tables.domain, self.score)
        self.node = Node(info, tables, self.services, self.config, seed=f"{self.seed}/{self.listen}", probe=self.probe)
        emit("joined", node=str(self.listen), domain=tables.domain,
             members=sorted(map(str, tables.local_domain_members)),
             external={d: sorted(map(str, e)) for d, e in sorted(tables.external_nodes_list.items())})
        self._apply(self.node.on_start(self.now()))

    def stop(self):
        self._stop.set()
        self.inbox.put(("stop",))

    def run(self):
        """Serve until :meth:`stop`; every handler runs on this thread."""
        if self.node is None:
            self.start()
        try:
            while not self._stop.is_set():
                timeout = None
                if self._timers:
                    timeout = max(0.0, self._timers[0][0] - time.monotonic())
                try:
                    item = self.inbox.get(timeout=timeout if timeout is not None else 0.5)
                except queue.Empty:
                    item = None
                if item is not None:
                    self._handle(item)
                self._fire_due()
        finally:
            self.transport.close()
            emit("stopped", node=str(self.listen), counters=dict(self.node.counters), transport=self.transport.counters)

    def _fire_due(self):
        while self._timers and self._timers[0][0] <= time.monotonic():
            _, _, name, gen = heapq.heappop(self._timers)
            if self._gen.get(name) == gen:
                self._apply(self.node.on_timer(name, self.now()))

    def _handle(self, item):
        kind = item[0]
        if kind == "msg":
            m = item[1]
            if isinstance(m, Lookup):
                self._client_lookup(m)
            else:
                self._apply(self.node.on_message(m, self.now()))
        elif kind == "migrated":
            _, decision, outcome = item
            emit("migration", node=str(self.listen), task=decision.task_id, target=str(decision.target),
                 tier=decision.tier.value, outcome=outcome.value)

    def _client_lookup(self, m: Lookup):
        res, effects = self.node.resolve_service(m.service, self.now())
        if res.pending:
            self._lookups[res.qid] = (m.reply_to, m.qid)
        else:
            self.transport.send(m.reply_to, LookupResult(m.qid, res.outcome, res.provider, res.reason))
        emit("lookup", node=str(self.listen), service=m.service, outcome=res.outcome.value if res.outcome else "PENDING")
        self._apply(effects)

    def _apply(self, effects):
        node = self.node
        for e in effects:
            if isinstance(e, Send):
                self.transport.send(e.dest, e.message)
            elif isinstance(e, StartTimer):
                gen = self._gen.get(e.name, 0) + 1
                self._gen[e.name] = gen
                heapq.heappush(self._timers, (time.monotonic() + e.delay, next(self._seq), e.name, gen))
            elif isinstance(e, StopTimer):
                self._gen[e.name] = self._gen.get(e.name, 0) + 1
            elif isinstance(e, Note):
                emit(e.event, node=str(self.listen), **e.detail)
            elif isinstance(e, Decided):
                d = e.decision
                emit("decision", node=str(self.listen), task=d.task_id, target=str(d.target), tier=d.tier.value)
                # executors may block; run them off the handler thread and post the outcome back
                threading.Thread(target=self._run_executor, args=(d,), daemon=True).start()
            elif isinstance(e, Resolved):
                client = self._lookups.pop(e.qid, None)
                r = e.resolution
                emit("resolved", node=str(self.listen), qid=e.qid, outcome=r.outcome.value,
                     provider=str(r.provider) if r.provider else None, reason=r.reason)
                if client is not None:
                    self.transport.send(client[0], LookupResult(client[1], r.outcome, r.provider, r.reason))
        table = {s: sorted(map(str, eps)) for s, eps in sorted(node.services.local_domain_services.items())}
        if table != self._services_seen:
            self._services_seen = table
            emit("domain_services", node=str(self.listen), services=table)

    def _run_executor(self, decision):
        self.inbox.put(("migrated", decision, execute_migration(decision, self.executor)))


# -- admin server --------------------------------------------------------------------------


class AdminServer:
    """Answers ADMIN_JOIN one request at a time and notifies existing nodes of newcomers."""

    def __init__(self, listen: Endpoint, topology: Topology, hop_threshold: int):
        self.listen = listen
        self.admin = Admin.for_topology(topology, hop_threshold)
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            self.sock.bind((listen.address, listen.port))
        except OSError as exc:
            self.sock.close()
            raise BindFailed(listen.port, exc.strerror or str(exc)) from exc
        self.sock.settimeout(0.2)
        self._stop = threading.Event()

    def assignment_table(self) -> list[tuple[str, list[str]]]:
        domains: dict[str, list[str]] = {}
        for ep in sorted(self.admin.assignment):
            domains.setdefault(self.admin.assignment[ep], []).append(str(ep))
        return sorted(domains.items(), key=lambda kv: int(kv[0][1:]))

    def handle(self, m: Message) -> tuple[Message, list[tuple[Endpoint, MemberNotice]]]:
        if not isinstance(m, AdminJoin):
            raise ModelError(f"unexpected {m.TOKEN}")
        try:
            if m.node in self.admin.admitted:
                tables, notices = self.admin.tables_for(m.node), []
            else:
                adm = self.admin.admit_node(m.node)
                tables, notices = adm.tables, adm.notices
        except (UnknownNode, DuplicateEndpoint):
            return AdminNak(m.node, "unknown_node"), []
        ext = tuple((d, tuple(sorted(eps))) for d, eps in sorted(tables.external_nodes_list.items()) if eps)
        return AdminTables(m.node, tables.domain, tuple(sorted(tables.local_domain_members)), ext), notices

    def serve(self):
        while not self._stop.is_set():
            try:
                data, addr = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                break
            try:
                m = decode(data)
                reply, notices = self.handle(m)
            except (MalformedMessage, ModelError):
                continue
            try:
                payload = encode(reply)
            except Exception:
                payload = encode(AdminNak(reply.node, "too_large"))
            self.sock.sendto(payload, addr)
            emit("admitted" if isinstance(reply, AdminTables) else "refused", node=str(reply.node),
                 domain=getattr(reply, "domain", None))
            for dst, notice in notices:
                self.sock.sendto(encode(notice), destination(dst, notice))

    def stop(self):
        self._stop.set()

    def close(self):
        self.sock.close()


# -- lookup client ---------------------------------------------------------------------------


def lookup(via: Endpoint, service: str, timeout: float = 15.0, qid: int | None = None) -> LookupResult | None:
    """Ask a running node to resolve ``service``; returns None if nothing comes back in time."""
    qid = qid if qid is not None else os.getpid() % 1_000_000
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.bind((via.address, 0))
        host, port = s.getsockname()
        s.sendto(encode(Lookup(Endpoint(host, port), service, qid)), destination(via, Lookup(via, service, qid)))
        deadline = time.monotonic() + timeout
        while True:
            left = deadline - time.monotonic()
            if left <= 0:
                return None
            s.settimeout(left)
            try:
                data, _ = s.recvfrom(65535)
            except socket.timeout:
                return None
            try:
                m = decode(data)
            except MalformedMessage:
                continue
            if isinstance(m, LookupResult) and m.qid == qid:
                return m


def format_result(r: LookupResult) -> str:
    if r.outcome is Outcome.NOTFOUND:
        return f"NOTFOUND {r.reason or '-'}"
    return f"{r.outcome.value} {r.provider}"
