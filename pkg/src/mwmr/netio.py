"""Real-network runtime: binary codec, multiplexed server, client connectors.

The server is one single-threaded readiness loop over non-blocking sockets:
connections are pooled, complete frames are fed to the replica one at a
time, so two requests can never interleave their state updates. Clients
keep persistent connections and length-prefixed frames rather than a
connection per operation.
"""

from __future__ import annotations

import json
import random
import selectors
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

from .core import (
    EventKind,
    HistoryEvent,
    ProcessId,
    Role,
    Tag,
    WriteId,
    server as server_id,
)
from .checker import write_history_csv
from .protocols import (
    Algorithm,
    ClientSession,
    INVOKE,
    InProgressEntry,
    MessageKind,
    OpKind,
    ProtocolMessage,
    Reply,
    SfwReplica,
    client_step,
    sfw_server_apply,
)
from .quorums import QuorumSystem, read_quorum_file, reply_complete
from .simnet import OpRecord, RunResult

MAX_FRAME = 1 << 20  # generous cap; a legitimate frame is far smaller
_TAG = struct.Struct(">QHI")
_HEAD = struct.Struct(">BBHI")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")


class FrameError(ValueError):
    """Bytes on the wire do not form a valid frame."""


def encode_frame(msg: ProtocolMessage) -> bytes:
    """Length-prefixed big-endian encoding; bijective on valid messages."""
    if len(msg.value) > 0xFFFF:
        raise FrameError(f"value too large: {len(msg.value)} bytes")
    if len(msg.inprogress) > 0xFFFF:
        raise FrameError(f"too many inprogress entries: {len(msg.inprogress)}")
    try:
        body = bytearray()
        body += _HEAD.pack(msg.kind, msg.sender.role, msg.sender.index, msg.op_seq)
        body += _TAG.pack(*msg.tag)
        body += _U16.pack(len(msg.value)) + msg.value
        body += _U16.pack(len(msg.inprogress))
        for entry in msg.inprogress:
            if len(entry.value) > 0xFFFF:
                raise FrameError("inprogress value too large")
            body += _U16.pack(entry.writer)
            body += _TAG.pack(*entry.tag)
            body += _U16.pack(len(entry.value)) + entry.value
        body += _TAG.pack(*msg.confirmed)
    except struct.error as exc:
        raise FrameError(f"field out of range: {exc}") from exc
    return _U32.pack(len(body)) + bytes(body)


class _Cursor:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FrameError("truncated frame")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def tag(self) -> Tag:
        return Tag(*_TAG.unpack(self.take(_TAG.size)))

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]


def decode_frame(frame: bytes) -> ProtocolMessage:
    """Inverse of :func:`encode_frame`; raises FrameError on any defect."""
    if len(frame) < 4:
        raise FrameError("truncated frame")
    (length,) = _U32.unpack(frame[:4])
    if length != len(frame) - 4:
        raise FrameError(f"length field says {length}, frame body is {len(frame) - 4}")
    cur = _Cursor(frame[4:])
    kind_b, role_b, index, op_seq = _HEAD.unpack(cur.take(_HEAD.size))
    try:
        kind = MessageKind(kind_b)
    except ValueError:
        raise FrameError(f"unknown message kind {kind_b:#x}") from None
    try:
        role = Role(role_b)
    except ValueError:
        raise FrameError(f"unknown sender role {role_b:#x}") from None
    tag = cur.tag()
    value = bytes(cur.take(cur.u16()))
    entries = []
    for _ in range(cur.u16()):
        w = cur.u16()
        etag = cur.tag()
        evalue = bytes(cur.take(cur.u16()))
        entries.append(InProgressEntry(w, etag, evalue))
    confirmed = cur.tag()
    if cur.pos != len(cur.data):
        raise FrameError(f"{len(cur.data) - cur.pos} trailing bytes after frame")
    return ProtocolMessage(
        kind=kind,
        sender=ProcessId(role, index),
        op_seq=op_seq,
        tag=tag,
        value=value,
        inprogress=tuple(entries),
        confirmed=confirmed,
    )


def frames_from(buffer: bytearray) -> List[bytes]:
    """Split complete frames off the front of a receive buffer, in place."""
    frames = []
    while len(buffer) >= 4:
        (length,) = _U32.unpack(bytes(buffer[:4]))
        if length > MAX_FRAME:
            raise FrameError(f"frame length {length} exceeds cap")
        if len(buffer) < 4 + length:
            break
        frames.append(bytes(buffer[: 4 + length]))
        del buffer[: 4 + length]
    return frames


@dataclass
class DeploymentConfig:
    """Who this process is and where everyone lives."""

    algorithm: Algorithm
    endpoints: Dict[int, Tuple[str, int]]
    quorum_file: str
    role: ProcessId
    ops: int = 20
    r_int: float = 10.0
    w_int: float = 10.0
    seed: int = 0
    history_out: Optional[str] = None
    clock: str = "monotonic"  # "wall" for multi-host runs with synced clocks


def load_deployment_config(path: str) -> DeploymentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    role_s, _, idx_s = raw["role"].partition(":")
    roles = {"server": Role.SERVER, "reader": Role.READER, "writer": Role.WRITER}
    if role_s not in roles:
        raise ValueError(f"{path}: role must be server/reader/writer, got {role_s!r}")
    endpoints = {}
    for key, hostport in raw["endpoints"].items():
        host, _, port = hostport.rpartition(":")
        endpoints[int(key)] = (host, int(port))
    return DeploymentConfig(
        algorithm=Algorithm.parse(raw["algorithm"]),
        endpoints=endpoints,
        quorum_file=raw["quorum_file"],
        role=ProcessId(roles[role_s], int(idx_s)),
        ops=int(raw.get("ops", 20)),
        r_int=float(raw.get("r_int", 10.0)),
        w_int=float(raw.get("w_int", 10.0)),
        seed=int(raw.get("seed", 0)),
        history_out=raw.get("history_out"),
        clock=raw.get("clock", "monotonic"),
    )


class _Conn:
    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self.inbuf = bytearray()
        self.outbuf = bytearray()


class RegisterServer:
    """One replica behind a single-threaded multiplexed accept/read loop.

    Every algorithm is served by the server-side-ordering replica: its
    replies carry the local copy plus the assignment snapshot, and clients
    of the simpler algorithms just ignore the extra sections.
    """

    def __init__(self, index: int, bind: Tuple[str, int] = ("127.0.0.1", 0)) -> None:
        self.pid = server_id(index)
        self.replica = SfwReplica()
        self.listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.listener.bind(bind)
        self.listener.listen(128)
        self.listener.setblocking(False)
        self.address: Tuple[str, int] = self.listener.getsockname()
        self.selector = selectors.DefaultSelector()
        self.selector.register(self.listener, selectors.EVENT_READ, None)

    def serve_forever(self, stop: Optional[threading.Event] = None, poll: float = 0.05) -> None:
        try:
            while stop is None or not stop.is_set():
                for key, mask in self.selector.select(poll):
                    if key.data is None:
                        self._accept()
                    else:
                        self._service(key.data, mask)
        finally:
            self.close()

    def close(self) -> None:
        for key in list(self.selector.get_map().values()):
            if key.data is not None:
                key.data.sock.close()
        self.selector.close()
        self.listener.close()

    def _accept(self) -> None:
        try:
            sock, _ = self.listener.accept()
        except (BlockingIOError, OSError):
            return
        sock.setblocking(False)
        conn = _Conn(sock)
        self.selector.register(sock, selectors.EVENT_READ, conn)

    def _drop(self, conn: _Conn) -> None:
        try:
            self.selector.unregister(conn.sock)
        except KeyError:
            pass
        conn.sock.close()

    def _service(self, conn: _Conn, mask: int) -> None:
        if mask & selectors.EVENT_READ:
            try:
                chunk = conn.sock.recv(65536)
            except (BlockingIOError, InterruptedError):
                chunk = None
            except OSError:
                self._drop(conn)
                return
            if chunk == b"":
                self._drop(conn)
                return
            if chunk:
                conn.inbuf += chunk
                try:
                    frames = frames_from(conn.inbuf)
                    for frame in frames:
                        msg = decode_frame(frame)
                        self.replica, reply = sfw_server_apply(self.replica, msg, self.pid)
                        conn.outbuf += encode_frame(reply)
                except FrameError:
                    # Fault isolation: one bad peer never takes the loop down.
                    self._drop(conn)
                    return
        if conn.outbuf:
            try:
                sent = conn.sock.send(conn.outbuf)
                del conn.outbuf[:sent]
            except (BlockingIOError, InterruptedError):
                pass
            except OSError:
                self._drop(conn)
                return
        want = selectors.EVENT_READ | (selectors.EVENT_WRITE if conn.outbuf else 0)
        try:
            self.selector.modify(conn.sock, want, conn)
        except KeyError:
            pass


def run_server(
    cfg: DeploymentConfig, stop: Optional[threading.Event] = None
) -> None:
    """Bind per the config (or MWMR_BIND) and serve until stopped."""
    import os

    if cfg.role.role is not Role.SERVER:
        raise ValueError(f"run_server needs a server role, got {cfg.role}")
    host, port = cfg.endpoints[cfg.role.index]
    override = os.environ.get("MWMR_BIND")
    if override:
        host, _, port_s = override.rpartition(":")
        port = int(port_s)
    srv = RegisterServer(cfg.role.index, (host, port))
    srv.serve_forever(stop)


_RETRY_ATTEMPTS = 3
_RETRY_GAP = 1.0
_UNREACHABLE_FOR = 30.0
_OP_TIMEOUT = 30.0


class RegisterClient:
    """Drives one client's operations over persistent connections."""

    def __init__(self, cfg: DeploymentConfig, qs: QuorumSystem) -> None:
        if cfg.role.role is Role.SERVER:
            raise ValueError("client roles only")
        self.cfg = cfg
        self.qs = qs
        self.pid = cfg.role
        self.rng = random.Random(f"{cfg.seed}:gap:{self.pid}")
        self.conns: Dict[int, socket.socket] = {}
        self.bufs: Dict[int, bytearray] = {}
        self.unreachable_until: Dict[int, float] = {}
        self.history: List[HistoryEvent] = []
        self.records: List[OpRecord] = []
        self.write_tags: Dict[WriteId, Tag] = {}

    def _now(self) -> Fraction:
        t = time.time() if self.cfg.clock == "wall" else time.monotonic()
        return Fraction(str(round(t, 6)))

    def _connect(self, index: int, attempts: int = _RETRY_ATTEMPTS) -> bool:
        if index in self.conns:
            return True
        if self.unreachable_until.get(index, 0.0) > time.monotonic():
            return False
        host, port = self.cfg.endpoints[index]
        for attempt in range(attempts):
            try:
                sock = socket.create_connection((host, port), timeout=2.0)
                sock.setblocking(False)
                self.conns[index] = sock
                self.bufs[index] = bytearray()
                return True
            except OSError:
                if attempt + 1 < attempts:
                    time.sleep(_RETRY_GAP)
        self.unreachable_until[index] = time.monotonic() + _UNREACHABLE_FOR
        return False

    def _drop(self, index: int) -> None:
        sock = self.conns.pop(index, None)
        if sock is not None:
            sock.close()
        self.bufs.pop(index, None)

    def _require_quorum(self) -> None:
        if reply_complete(self.qs, self.conns.keys()) is None:
            raise RuntimeError(
                f"{self.pid}: no full quorum reachable "
                f"(connected: {sorted(self.conns)})"
            )

    def _send(self, index: int, msg: ProtocolMessage) -> None:
        sock = self.conns.get(index)
        if sock is None:
            return
        data = encode_frame(msg)
        try:
            sock.setblocking(True)
            sock.sendall(data)
            sock.setblocking(False)
        except OSError:
            self._drop(index)

    def _dispatch(self, sends: List[Tuple[int, ProtocolMessage]]) -> None:
        for dest, msg in sends:
            if dest not in self.conns:
                self._connect(dest, attempts=1)
            self._send(dest, msg)

    def run(self) -> RunResult:
        for index in sorted(self.cfg.endpoints):
            self._connect(index)
        self._require_quorum()
        interval = self.cfg.r_int if self.pid.role is Role.READER else self.cfg.w_int
        completed = {OpKind.READ: 0, OpKind.WRITE: 0}
        incomplete: List[Tuple[ProcessId, int]] = []
        try:
            for op_seq in range(1, self.cfg.ops + 1):
                time.sleep(self.rng.random() * interval)
                done = self._one_op(op_seq)
                if done is None:
                    incomplete.append((self.pid, op_seq))
                    break
                completed[done] += 1
        finally:
            for index in list(self.conns):
                self._drop(index)
            if self.cfg.history_out:
                write_history_csv(self.cfg.history_out, self.history)
        return RunResult(
            config=None,
            ops_target=self.cfg.ops,
            history=list(self.history),
            records=list(self.records),
            completed_reads=completed[OpKind.READ],
            completed_writes=completed[OpKind.WRITE],
            crashed_servers=frozenset(),
            incomplete=tuple(incomplete),
            write_tags=dict(self.write_tags),
        )

    def _one_op(self, op_seq: int) -> Optional[OpKind]:
        if self.pid.role is Role.READER:
            session = ClientSession.for_read(self.cfg.algorithm, self.pid, op_seq)
            ev_kind = EventKind.READ_INVOKE
        else:
            value = f"{self.pid}.{op_seq}".encode("ascii")
            session = ClientSession.for_write(
                self.cfg.algorithm, self.pid, op_seq, value, op_seq
            )
            ev_kind = EventKind.WRITE_INVOKE
        invoked_at = self._now()
        self.history.append(HistoryEvent(self.pid, op_seq, ev_kind, invoked_at))
        result = client_step(session, INVOKE, self.qs)
        self._dispatch(result.sends)

        deadline = time.monotonic() + _OP_TIMEOUT
        sel = selectors.DefaultSelector()
        registered = set()
        try:
            while time.monotonic() < deadline:
                for index, sock in list(self.conns.items()):
                    if index not in registered:
                        sel.register(sock, selectors.EVENT_READ, index)
                        registered.add(index)
                if not self.conns:
                    break
                for key, _ in sel.select(0.2):
                    index = key.data
                    try:
                        chunk = key.fileobj.recv(65536)
                    except (BlockingIOError, InterruptedError):
                        continue
                    except OSError:
                        sel.unregister(key.fileobj)
                        registered.discard(index)
                        self._drop(index)
                        continue
                    if chunk == b"":
                        sel.unregister(key.fileobj)
                        registered.discard(index)
                        self._drop(index)
                        continue
                    self.bufs[index] += chunk
                    for frame in frames_from(self.bufs[index]):
                        msg = decode_frame(frame)
                        result = client_step(session, Reply(index, msg), self.qs)
                        self._dispatch(result.sends)
                        if result.completion is not None:
                            done = result.completion
                            responded_at = self._now()
                            self.history.append(
                                HistoryEvent(
                                    self.pid,
                                    op_seq,
                                    ev_kind.respond_kind,
                                    responded_at,
                                    done.tag,
                                    done.rounds,
                                )
                            )
                            self.records.append(
                                OpRecord(
                                    self.pid,
                                    op_seq,
                                    done.kind,
                                    invoked_at,
                                    responded_at,
                                    done.rounds,
                                    done.tag,
                                )
                            )
                            if done.kind is OpKind.WRITE:
                                self.write_tags[WriteId(self.pid, op_seq)] = done.tag
                            return done.kind
        finally:
            sel.close()
        return None



def run_client(cfg: DeploymentConfig) -> RunResult:
    """Connect, run the configured workload, flush the history CSV."""
    qs = read_quorum_file(cfg.quorum_file)
    return RegisterClient(cfg, qs).run()


@dataclass
class LoopbackCluster:
    """An in-process cluster for tests and single-host benchmarks."""

    algorithm: Algorithm
    qs: QuorumSystem
    servers: List[RegisterServer] = field(default_factory=list)
    threads: List[threading.Thread] = field(default_factory=list)
    stop: threading.Event = field(default_factory=threading.Event)

    @property
    def endpoints(self) -> Dict[int, Tuple[str, int]]:
        return {i: srv.address for i, srv in enumerate(self.servers)}

    def client_config(self, role: ProcessId, ops: int, r_int: float, w_int: float, seed: int) -> DeploymentConfig:
        return DeploymentConfig(
            algorithm=self.algorithm,
            endpoints=self.endpoints,
            quorum_file="",
            role=role,
            ops=ops,
            r_int=r_int,
            w_int=w_int,
            seed=seed,
        )

    def shutdown(self) -> None:
        self.stop.set()
        for t in self.threads:
            t.join(timeout=5.0)


def start_loopback_cluster(algorithm: Algorithm, qs: QuorumSystem) -> LoopbackCluster:
    cluster = LoopbackCluster(algorithm, qs)
    for i in range(qs.server_count):
        srv = RegisterServer(i)
        cluster.servers.append(srv)
        t = threading.Thread(
            target=srv.serve_forever, args=(cluster.stop, 0.01), daemon=True
        )
        cluster.threads.append(t)
        t.start()
    return cluster


def run_loopback_workload(
    algorithm: Algorithm,
    qs: QuorumSystem,
    *,
    readers: int,
    writers: int,
    ops: int,
    r_int: float = 0.5,
    w_int: float = 0.5,
    seed: int = 0,
) -> List[RunResult]:
    """Spin up a cluster, run all clients concurrently, tear down."""
    from .core import reader as reader_id, writer as writer_id

    cluster = start_loopback_cluster(algorithm, qs)
    results: Dict[ProcessId, RunResult] = {}
    errors: List[BaseException] = []

    def drive(role: ProcessId) -> None:
        cfg = cluster.client_config(role, ops, r_int, w_int, seed)
        try:
            results[role] = RegisterClient(cfg, qs).run()
        except BaseException as exc:  # surfaced after join
            errors.append(exc)

    try:
        threads = []
        for i in range(readers):
            threads.append(threading.Thread(target=drive, args=(reader_id(i),)))
        for i in range(writers):
            threads.append(threading.Thread(target=drive, args=(writer_id(i),)))
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        cluster.shutdown()
    if errors:
        raise errors[0]
    return [results[p] for p in sorted(results)]


def merge_histories(results: List[RunResult]) -> Tuple[List[HistoryEvent], Dict[WriteId, Tag]]:
    history: List[HistoryEvent] = []
    tags: Dict[WriteId, Tag] = {}
    for res in results:
        history.extend(res.history)
        tags.update(res.write_tags)
    history.sort(key=lambda e: (e.time, e.process.role, e.process.index, e.op_seq))
    return history, tags
