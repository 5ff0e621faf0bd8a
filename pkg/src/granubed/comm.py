"""Rank communicator: in-process thread backend and a multi-process local
socket backend sharing the same framing.

Messages between a fixed (sender, receiver, tag) pair arrive in send order.
Reductions fold gathered per-key partials in ascending key order at rank 0
and broadcast, so every rank sees bit-identical values and the fold result
does not depend on how keys (boxes) are spread over ranks.
"""

from __future__ import annotations

import os
import pickle
import queue
import socket
import struct
import threading
import traceback

from .core import SimulationError


class CommAborted(RuntimeError):
    """Another rank failed; the collective cannot complete."""


class _TagDemux:
    """Per-source buffering that serves recv(tag) in FIFO order per tag."""

    def __init__(self):
        self.queue = queue.Queue()
        self.buffers: dict[str, list] = {}

    def put(self, tag, payload):
        self.queue.put((tag, payload))

    def try_get(self, tag):
        """Non-blocking: drain arrivals into tag buffers, pop a match or None."""
        while True:
            try:
                got_tag, payload = self.queue.get_nowait()
            except queue.Empty:
                break
            self.buffers.setdefault(got_tag, []).append(payload)
        buf = self.buffers.get(tag)
        return (True, buf.pop(0)) if buf else (False, None)

    def get(self, tag, abort_check, timeout=0.05):
        buf = self.buffers.get(tag)
        if buf:
            return buf.pop(0)
        while True:
            try:
                got_tag, payload = self.queue.get(timeout=timeout)
            except queue.Empty:
                abort_check()
                continue
            if got_tag == tag:
                return payload
            self.buffers.setdefault(got_tag, []).append(payload)


class _Collectives:
    """gather/bcast/barrier/fold built on point-to-point send/recv."""

    rank: int
    nranks: int

    def send(self, dst, tag, payload):  # pragma: no cover - interface
        raise NotImplementedError

    def recv(self, src, tag):  # pragma: no cover - interface
        raise NotImplementedError

    def gather(self, obj, root: int = 0):
        if self.rank == root:
            out = [None] * self.nranks
            out[root] = obj
            for src in range(self.nranks):
                if src != root:
                    out[src] = self.recv(src, "gather")
            return out
        self.send(root, "gather", obj)
        return None

    def bcast(self, obj, root: int = 0):
        if self.rank == root:
            for dst in range(self.nranks):
                if dst != root:
                    self.send(dst, "bcast", obj)
            return obj
        return self.recv(root, "bcast")

    def barrier(self):
        self.bcast(self.gather(None))

    def fold(self, items, op: str, default: float = 0.0) -> float:
        """Reduce (key, value) pairs from all ranks in ascending key order."""
        gathered = self.gather(list(items))
        if self.rank == 0:
            merged = []
            for part in gathered:
                merged.extend(part)
            merged.sort(key=lambda kv: kv[0])
            if not merged:
                value = default
            else:
                value = merged[0][1]
                for _, v in merged[1:]:
                    if op == "sum":
                        value = value + v
                    elif op == "max":
                        value = max(value, v)
                    else:
                        value = min(value, v)
        else:
            value = None
        return self.bcast(value)

    def allreduce_max(self, value: float) -> float:
        return self.fold([(self.rank, value)], "max", default=value)

    def allreduce_min(self, value: float) -> float:
        return self.fold([(self.rank, value)], "min", default=value)

    def allreduce_sum(self, value):
        return self.fold([(self.rank, value)], "sum", default=0)


class NullComm(_Collectives):
    """Single-rank communicator; point-to-point traffic is a bug."""

    def __init__(self):
        self.rank = 0
        self.nranks = 1

    def send(self, dst, tag, payload):
        raise SimulationError("NullComm cannot send")

    def recv(self, src, tag):
        raise SimulationError("NullComm cannot recv")


class _ThreadHub:
    def __init__(self, nranks: int):
        self.nranks = nranks
        self.demux = {(s, d): _TagDemux() for s in range(nranks) for d in range(nranks)}
        self.abort_exc = None
        # Rank threads hold this while computing and drop it while blocked in
        # recv. Serializing the numpy sections avoids the GIL handoff convoy
        # that makes many-small-ops workloads collapse when threads exceed
        # cores; ranks still interleave at every communication point.
        self.compute_lock = threading.Lock()

    def abort(self, exc):
        self.abort_exc = exc


class ThreadComm(_Collectives):
    """Reference in-process backend: ranks are threads with ordered mailboxes."""

    def __init__(self, hub: _ThreadHub, rank: int):
        self.hub = hub
        self.rank = rank
        self.nranks = hub.nranks

    def _abort_check(self):
        if self.hub.abort_exc is not None:
            raise CommAborted(f"rank failed elsewhere: {self.hub.abort_exc}")

    def send(self, dst, tag, payload):
        self.hub.demux[(self.rank, dst)].put(tag, payload)

    def recv(self, src, tag):
        demux = self.hub.demux[(src, self.rank)]
        hit, payload = demux.try_get(tag)
        if hit:
            return payload
        self.hub.compute_lock.release()
        try:
            return demux.get(tag, self._abort_check)
        finally:
            self.hub.compute_lock.acquire()


# ---------------------------------------------------------------------------
# Socket backend: full mesh of localhost TCP connections, framed messages.

_FRAME = struct.Struct("<I")  # tag length; payload length uses <Q


def _send_frame(sock, lock, tag: str, payload: bytes):
    tag_b = tag.encode()
    header = _FRAME.pack(len(tag_b)) + tag_b + struct.pack("<Q", len(payload))
    with lock:
        sock.sendall(header + payload)


def _read_exact(sock, n: int) -> bytes:
    parts = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise SimulationError("peer socket closed mid-message")
        parts.append(chunk)
        n -= len(chunk)
    return b"".join(parts)


class SocketComm(_Collectives):
    """Multi-process backend over localhost sockets, same byte protocol."""

    def __init__(self, rank: int, nranks: int, peers: dict[int, socket.socket]):
        self.rank = rank
        self.nranks = nranks
        self.peers = peers
        self.locks = {r: threading.Lock() for r in peers}
        self.demux = {r: _TagDemux() for r in peers}
        self.abort_exc = None
        self._readers = []
        for r, sock in peers.items():
            t = threading.Thread(target=self._reader, args=(r, sock), daemon=True)
            t.start()
            self._readers.append(t)

    def _reader(self, src, sock):
        try:
            while True:
                (tag_len,) = _FRAME.unpack(_read_exact(sock, 4))
                tag = _read_exact(sock, tag_len).decode()
                (n,) = struct.unpack("<Q", _read_exact(sock, 8))
                payload = _read_exact(sock, n)
                kind = payload[:1]
                body = payload[1:]
                self.demux[src].put(tag, pickle.loads(body) if kind == b"P" else body)
        except Exception as exc:  # reader dies with the connection
            self.abort_exc = exc

    def _abort_check(self):
        if self.abort_exc is not None:
            raise CommAborted(str(self.abort_exc))

    def send(self, dst, tag, payload):
        if isinstance(payload, (bytes, bytearray, memoryview)):
            body = b"B" + bytes(payload)
        else:
            body = b"P" + pickle.dumps(payload, protocol=pickle.HIGHEST_PROTOCOL)
        _send_frame(self.peers[dst], self.locks[dst], tag, body)

    def recv(self, src, tag):
        return self.demux[src].get(tag, self._abort_check)

    def close(self):
        for sock in self.peers.values():
            try:
                sock.close()
            except OSError:
                pass


def _socket_child(rank, nranks, conn, result_q, fn, args):
    try:
        listener = socket.socket()
        listener.bind(("127.0.0.1", 0))
        listener.listen(nranks)
        conn.send(listener.getsockname()[1])
        ports = conn.recv()
        peers: dict[int, socket.socket] = {}
        for dst in range(rank + 1, nranks):
            s = socket.create_connection(("127.0.0.1", ports[dst]))
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            s.sendall(struct.pack("<q", rank))
            peers[dst] = s
        for _ in range(rank):
            s, _addr = listener.accept()
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            (peer,) = struct.unpack("<q", _read_exact(s, 8))
            peers[peer] = s
        listener.close()
        comm = SocketComm(rank, nranks, peers)
        result = fn(rank, comm, *args)
        comm.barrier()
        comm.close()
        result_q.put((rank, "ok", result))
    except Exception:
        result_q.put((rank, "err", traceback.format_exc()))


def _run_threads(nranks, fn, args):
    hub = _ThreadHub(nranks)
    results = [None] * nranks
    errors = [None] * nranks

    def work(rank):
        hub.compute_lock.acquire()
        try:
            results[rank] = fn(rank, ThreadComm(hub, rank), *args)
        except BaseException as exc:  # propagate to the caller thread
            errors[rank] = exc
            hub.abort(exc)
        finally:
            hub.compute_lock.release()

    threads = [threading.Thread(target=work, args=(r,)) for r in range(nranks)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for exc in errors:
        if exc is not None and not isinstance(exc, CommAborted):
            raise exc
    for exc in errors:
        if exc is not None:
            raise exc
    return results


def _run_sockets(nranks, fn, args):
    import multiprocessing as mp

    ctx = mp.get_context("fork")
    pipes = [ctx.Pipe() for _ in range(nranks)]
    result_q = ctx.SimpleQueue()
    procs = [ctx.Process(target=_socket_child,
                         args=(r, nranks, pipes[r][1], result_q, fn, args))
             for r in range(nranks)]
    for p in procs:
        p.start()
    ports = [pipes[r][0].recv() for r in range(nranks)]
    for r in range(nranks):
        pipes[r][0].send(ports)
    results = [None] * nranks
    failure = None
    for _ in range(nranks):
        rank, status, payload = result_q.get()
        if status == "ok":
            results[rank] = payload
        elif failure is None:
            failure = (rank, payload)
    for p in procs:
        p.join()
    if failure is not None:
        raise SimulationError(f"rank {failure[0]} failed:\n{failure[1]}")
    return results


def run_spmd(nranks: int, fn, *args, backend: str | None = None):
    """Run fn(rank, comm, *args) on every rank; returns per-rank results.

    Backend resolution order: explicit argument, GRANUBED_COMM environment
    variable, then the in-process thread backend.
    """
    if backend is None:
        backend = os.environ.get("GRANUBED_COMM", "threads")
    if nranks == 1 and backend == "threads":
        return [fn(0, NullComm(), *args)]
    if backend == "threads":
        return _run_threads(nranks, fn, args)
    if backend == "sockets":
        return _run_sockets(nranks, fn, args)
    raise SimulationError(f"unknown comm backend {backend!r}")
