"""Party/server message transports: in-process queues and localhost TCP.

Both transports move the identical frame stream, so trajectories and byte
accounting match between them.  Parties always run in their own threads; the
transports differ only in how bytes travel.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading

from .wire import WireError, read_frame_from


class TransportError(RuntimeError):
    pass


class ByteAccounting:
    """Thread-safe tally of frame bytes moved, split by node."""

    def __init__(self):
        self._lock = threading.Lock()
        self.tx: dict = {}
        self.rx: dict = {}

    def count(self, sender: str, receiver: str, nbytes: int) -> None:
        with self._lock:
            self.tx[sender] = self.tx.get(sender, 0) + nbytes
            self.rx[receiver] = self.rx.get(receiver, 0) + nbytes

    def totals(self) -> tuple[int, int]:
        with self._lock:
            return sum(self.tx.values()), sum(self.rx.values())


_CLOSED = object()


class QueueLink:
    """One party's duplex in-process channel."""

    def __init__(self, party_id: int, accounting: ByteAccounting):
        self.party_id = party_id
        self.accounting = accounting
        self._to_party: queue.Queue = queue.Queue()
        self._to_server: queue.Queue = queue.Queue()

    def _take(self, q: queue.Queue, waiter: str, timeout):
        try:
            frame = q.get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"{waiter} timed out on the channel") from None
        if frame is _CLOSED:
            raise TransportError(f"channel to {waiter} closed")
        return frame

    # party side
    def send(self, frame: bytes) -> None:
        self.accounting.count(f"party-{self.party_id}", "server", len(frame))
        self._to_server.put(frame)

    def recv(self, timeout: float | None = None) -> bytes:
        return self._take(self._to_party, f"party-{self.party_id}", timeout)

    # server side
    def server_send(self, frame: bytes) -> None:
        self.accounting.count("server", f"party-{self.party_id}", len(frame))
        self._to_party.put(frame)

    def server_recv(self, timeout: float | None = None) -> bytes:
        return self._take(self._to_server, "server", timeout)

    def close(self) -> None:
        # Unblock any thread parked on either direction.
        self._to_party.put(_CLOSED)
        self._to_server.put(_CLOSED)


class SocketLink:
    """One party's duplex TCP channel (either endpoint)."""

    def __init__(self, sock: socket.socket, party_id: int, side: str,
                 accounting: ByteAccounting):
        self.sock = sock
        self.party_id = party_id
        self.side = side  # "party" or "server"
        self.accounting = accounting
        self._send_lock = threading.Lock()

    def _peer(self) -> tuple[str, str]:
        me = f"party-{self.party_id}" if self.side == "party" else "server"
        other = "server" if self.side == "party" else f"party-{self.party_id}"
        return me, other

    def _send(self, frame: bytes) -> None:
        # Count before the write so a frame observed by the receiver is
        # always already accounted (round snapshots read the totals).
        me, other = self._peer()
        self.accounting.count(me, other, len(frame))
        with self._send_lock:
            self.sock.sendall(frame)

    def _recv(self, timeout: float | None = None) -> bytes:
        self.sock.settimeout(timeout)
        try:
            return read_frame_from(self.sock.recv)
        except socket.timeout:
            me, _ = self._peer()
            raise TransportError(f"{me} timed out on the wire") from None
        except WireError:
            raise
        except OSError as exc:
            raise TransportError(f"socket failure: {exc}") from None

    # party side
    def send(self, frame: bytes) -> None:
        self._send(frame)

    def recv(self, timeout: float | None = None) -> bytes:
        return self._recv(timeout)

    # server side
    def server_send(self, frame: bytes) -> None:
        self._send(frame)

    def server_recv(self, timeout: float | None = None) -> bytes:
        return self._recv(timeout)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def open_in_process_links(party_count: int):
    acct = ByteAccounting()
    return [QueueLink(p, acct) for p in range(party_count)], acct, None


def open_tcp_links(party_count: int, host: str = "127.0.0.1",
                   connect_timeout: float = 10.0):
    """Listen on an ephemeral port and connect one socket pair per party.

    Returns (server_links, party_links, accounting, listener): server_links
    are the server-side endpoints indexed by party id, party_links the party
    endpoints.
    """
    acct = ByteAccounting()
    listener = socket.create_server((host, 0))
    port = listener.getsockname()[1]

    party_socks: dict = {}
    server_socks: dict = {}

    def _connect(pid: int):
        s = socket.create_connection((host, port), timeout=connect_timeout)
        s.sendall(struct.pack(">H", pid))
        party_socks[pid] = s

    threads = [threading.Thread(target=_connect, args=(p,)) for p in range(party_count)]
    for t in threads:
        t.start()
    for _ in range(party_count):
        conn, _ = listener.accept()
        pid = struct.unpack(">H", read_frame_bytes(conn, 2))[0]
        server_socks[pid] = conn
    for t in threads:
        t.join()

    server_links = [SocketLink(server_socks[p], p, "server", acct)
                    for p in range(party_count)]
    party_links = [SocketLink(party_socks[p], p, "party", acct)
                   for p in range(party_count)]
    return server_links, party_links, acct, listener


def read_frame_bytes(sock: socket.socket, count: int) -> bytes:
    buf = bytearray()
    while len(buf) < count:
        chunk = sock.recv(count - len(buf))
        if not chunk:
            raise TransportError("connection closed during handshake")
        buf.extend(chunk)
    return bytes(buf)
