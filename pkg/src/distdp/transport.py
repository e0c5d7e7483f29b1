"""Channels between protocol parties.

Two networks share one endpoint interface:

* :class:`InProcessNetwork` passes frames through in-memory queues.
* :class:`TcpNetwork` opens a loopback TCP connection per link and seals
  each frame with AES-GCM-256 under a pre-shared link key.

Fault injection lives here, not in the parties.  A :class:`FaultScript`
is consulted on every ``send``.  It matches frames by the sender id and
round id found in the protocol header.
"""

from __future__ import annotations

import collections
import enum
import hashlib
import json
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthenticationError, ChannelClosed, FaultInjected, Timeout

_LENGTH = struct.Struct(">I")
# round_id (u64) and sender (u32) open every protocol frame
_ROUTING = struct.Struct("<QI")
MAX_FRAME = 1 << 30


class FaultAction(str, enum.Enum):
    DROP_BEFORE_SEND = "drop_before_send"
    CRASH_AFTER_PARTIAL_SEND = "crash_after_partial_send"
    DELAY = "delay"


@dataclass(frozen=True)
class Fault:
    party_id: int
    round_id: int
    action: FaultAction
    sends_before_crash: int = 1
    delay: float = 0.0


@dataclass
class FaultScript:
    """Deterministic list of faults keyed by (party, round)."""

    faults: list[Fault] = field(default_factory=list)

    def __post_init__(self):
        self._sent = collections.Counter()
        self._lock = threading.Lock()
        self._by_key = {}
        for f in self.faults:
            self._by_key[(f.party_id, f.round_id)] = Fault(
                f.party_id, f.round_id, FaultAction(f.action), f.sends_before_crash, f.delay
            )

    @classmethod
    def of(cls, *entries) -> "FaultScript":
        """Build from ``(party_id, round_id, action[, extra])`` tuples."""
        faults = []
        for e in entries:
            party, rnd, action, *rest = e
            action = FaultAction(action)
            kw = {}
            if rest and action is FaultAction.CRASH_AFTER_PARTIAL_SEND:
                kw["sends_before_crash"] = int(rest[0])
            elif rest and action is FaultAction.DELAY:
                kw["delay"] = float(rest[0])
            faults.append(Fault(party, rnd, action, **kw))
        return cls(faults)

    def check(self, frame: bytes) -> float:
        """Apply the script to an outgoing frame.

        Returns the delivery delay in seconds.  Raises FaultInjected when
        the sender is scripted to fail at this point.
        """
        if len(frame) < _ROUTING.size or not self._by_key:
            return 0.0
        round_id, sender = _ROUTING.unpack_from(frame)
        fault = self._by_key.get((sender, round_id))
        if fault is None:
            return 0.0
        if fault.action is FaultAction.DROP_BEFORE_SEND:
            raise FaultInjected(f"party {sender} dropped before sending in round {round_id}")
        if fault.action is FaultAction.CRASH_AFTER_PARTIAL_SEND:
            with self._lock:
                n = self._sent[(sender, round_id)]
                if n >= fault.sends_before_crash:
                    raise FaultInjected(
                        f"party {sender} crashed after {n} sends in round {round_id}"
                    )
                self._sent[(sender, round_id)] = n + 1
            return 0.0
        return fault.delay


class Endpoint:
    """One party's end of a duplex link to a single peer."""

    party_id: int
    peer_id: int

    def send(self, frame: bytes) -> None:
        raise NotImplementedError

    def recv_with_timeout(self, timeout: float) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class Network:
    """Factory of endpoints plus per-recipient frame accounting."""

    def __init__(self, fault_script: FaultScript | None = None):
        self.fault_script = fault_script or FaultScript()
        self.frames_delivered = collections.Counter()
        self._count_lock = threading.Lock()

    def endpoint(self, party_id: int, peer_id: int) -> Endpoint:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def _count(self, recipient: int):
        with self._count_lock:
            self.frames_delivered[recipient] += 1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _Pipe:
    """One direction of an in-process link."""

    def __init__(self):
        self.items = collections.deque()
        self.cond = threading.Condition()
        self.closed = False


class InProcessEndpoint(Endpoint):
    def __init__(self, network: "InProcessNetwork", party_id: int, peer_id: int,
                 outgoing: _Pipe, incoming: _Pipe):
        self.network = network
        self.party_id = party_id
        self.peer_id = peer_id
        self._out = outgoing
        self._in = incoming

    def send(self, frame: bytes) -> None:
        if self._out.closed:
            raise ChannelClosed(f"link {self.party_id}->{self.peer_id} is closed")
        delay = self.network.fault_script.check(frame)
        deliver_at = time.monotonic() + delay
        with self._out.cond:
            self._out.items.append((deliver_at, bytes(frame)))
            self._out.cond.notify_all()

    def recv_with_timeout(self, timeout: float) -> bytes:
        deadline = time.monotonic() + max(timeout, 0.0)
        pipe = self._in
        with pipe.cond:
            while True:
                now = time.monotonic()
                if pipe.items and pipe.items[0][0] <= now:
                    _, frame = pipe.items.popleft()
                    self.network._count(self.party_id)
                    return frame
                if pipe.closed and not pipe.items:
                    raise ChannelClosed(f"link {self.peer_id}->{self.party_id} is closed")
                if now >= deadline:
                    raise Timeout(f"no frame from {self.peer_id} within {timeout}s")
                wait = deadline - now
                if pipe.items:
                    wait = min(wait, pipe.items[0][0] - now)
                pipe.cond.wait(wait)

    def close(self) -> None:
        for pipe in (self._out, self._in):
            with pipe.cond:
                pipe.closed = True
                pipe.cond.notify_all()


class InProcessNetwork(Network):
    """Queue-backed network; delayed frames become visible only after their delay."""

    def __init__(self, fault_script: FaultScript | None = None):
        super().__init__(fault_script)
        self._pipes: dict[tuple[int, int], _Pipe] = {}
        self._lock = threading.Lock()

    def _pipe(self, src: int, dst: int) -> _Pipe:
        with self._lock:
            pipe = self._pipes.get((src, dst))
            if pipe is None:
                pipe = self._pipes[(src, dst)] = _Pipe()
            return pipe

    def endpoint(self, party_id: int, peer_id: int) -> InProcessEndpoint:
        return InProcessEndpoint(self, party_id, peer_id,
                                 self._pipe(party_id, peer_id), self._pipe(peer_id, party_id))

    def close(self) -> None:
        for pipe in list(self._pipes.values()):
            with pipe.cond:
                pipe.closed = True
                pipe.cond.notify_all()


def link_salt(key: bytes, sender: int, recipient: int) -> bytes:
    """32-bit nonce prefix, distinct for each direction of a link."""
    return hashlib.sha256(key + struct.pack("<II", sender, recipient)).digest()[:4]


class KeyStore:
    """Pre-shared 256-bit keys, one per unordered (party, party) link.

    Links missing from the store get a fresh random key when
    ``generate_missing`` is set; otherwise a KeyError is raised.
    """

    def __init__(self, keys: dict | None = None, generate_missing: bool = True):
        self._keys: dict[frozenset, bytes] = {}
        self.generate_missing = generate_missing
        for (a, b), key in (keys or {}).items():
            self.set(a, b, key)

    def set(self, a: int, b: int, key: bytes):
        if len(key) != 32:
            raise ValueError(f"link keys must be 32 bytes, got {len(key)}")
        self._keys[frozenset((a, b))] = bytes(key)

    def key_for(self, a: int, b: int) -> bytes:
        link = frozenset((a, b))
        if link not in self._keys:
            if not self.generate_missing:
                raise KeyError(f"no pre-shared key for link {a}-{b}")
            self._keys[link] = AESGCM.generate_key(bit_length=256)
        return self._keys[link]

    @classmethod
    def from_mapping(cls, mapping: dict, generate_missing: bool = False) -> "KeyStore":
        """Parse ``{"<a>-<b>": "<64 hex chars>", ...}``."""
        keys = {}
        for link, hexkey in mapping.items():
            a, b = (int(p) for p in str(link).split("-"))
            keys[(a, b)] = bytes.fromhex(hexkey)
        return cls(keys, generate_missing=generate_missing)

    @classmethod
    def load(cls, path: str | Path) -> "KeyStore":
        data = json.loads(Path(path).read_text())
        return cls.from_mapping(data.get("link_keys", data))


class SocketEndpoint(Endpoint):
    """Length-prefixed AES-GCM frames over a connected stream socket.

    Wire format: u32 big-endian length, then ``ciphertext || tag``.  The
    nonce is the 4-byte direction salt followed by a 64-bit big-endian
    frame counter; both sides advance their counter once per frame, so a
    replayed or reordered frame fails authentication.
    """

    def __init__(self, sock: socket.socket, party_id: int, peer_id: int, key: bytes,
                 fault_script: FaultScript | None = None, network: Network | None = None):
        self.sock = sock
        self.party_id = party_id
        self.peer_id = peer_id
        self._aead = AESGCM(key)
        self._send_salt = link_salt(key, party_id, peer_id)
        self._recv_salt = link_salt(key, peer_id, party_id)
        self._send_counter = 0
        self._recv_counter = 0
        self._buf = bytearray()
        self._send_lock = threading.Lock()
        self._closed = False
        self._fault_script = fault_script or FaultScript()
        self._network = network
        self._timers: list[threading.Timer] = []

    def _nonce(self, salt: bytes, counter: int) -> bytes:
        return salt + counter.to_bytes(8, "big")

    def _write(self, frame: bytes):
        with self._send_lock:
            if self._closed:
                return
            nonce = self._nonce(self._send_salt, self._send_counter)
            self._send_counter += 1
            sealed = self._aead.encrypt(nonce, frame, _LENGTH.pack(len(frame) + 16))
            try:
                self.sock.sendall(_LENGTH.pack(len(sealed)) + sealed)
            except OSError as exc:
                raise ChannelClosed(str(exc)) from exc

    def send(self, frame: bytes) -> None:
        if self._closed:
            raise ChannelClosed(f"link {self.party_id}->{self.peer_id} is closed")
        delay = self._fault_script.check(frame)
        if delay > 0:
            timer = threading.Timer(delay, self._write, args=(bytes(frame),))
            timer.daemon = True
            self._timers.append(timer)
            timer.start()
        else:
            self._write(frame)

    def _fill(self, n: int, deadline: float):
        while len(self._buf) < n:
            # past the deadline a non-blocking read still collects frames that already arrived
            remaining = max(deadline - time.monotonic(), 0.0)
            self.sock.settimeout(remaining)
            try:
                chunk = self.sock.recv(max(65536, n - len(self._buf)))
            except (socket.timeout, BlockingIOError):
                raise Timeout(f"no frame from {self.peer_id} in time") from None
            except OSError as exc:
                raise ChannelClosed(str(exc)) from exc
            if not chunk:
                raise ChannelClosed(f"peer {self.peer_id} closed the connection")
            self._buf.extend(chunk)

    def recv_with_timeout(self, timeout: float) -> bytes:
        if self._closed:
            raise ChannelClosed(f"link {self.peer_id}->{self.party_id} is closed")
        deadline = time.monotonic() + max(timeout, 0.0)
        self._fill(_LENGTH.size, deadline)
        (length,) = _LENGTH.unpack_from(self._buf)
        if length > MAX_FRAME:
            raise ChannelClosed(f"oversized frame ({length} bytes) from {self.peer_id}")
        self._fill(_LENGTH.size + length, deadline)
        sealed = bytes(self._buf[_LENGTH.size:_LENGTH.size + length])
        del self._buf[:_LENGTH.size + length]
        nonce = self._nonce(self._recv_salt, self._recv_counter)
        self._recv_counter += 1
        try:
            frame = self._aead.decrypt(nonce, sealed, _LENGTH.pack(length))
        except InvalidTag:
            raise AuthenticationError(
                f"frame {self._recv_counter - 1} from {self.peer_id} failed authentication"
            ) from None
        if self._network is not None:
            self._network._count(self.party_id)
        return frame

    def close(self) -> None:
        for t in self._timers:
            t.join()
        self._closed = True
        try:
            self.sock.close()
        except OSError:
            pass


class TcpNetwork(Network):
    """Loopback TCP network; each link gets its own connection and key."""

    def __init__(self, keys: KeyStore | None = None, fault_script: FaultScript | None = None,
                 host: str = "127.0.0.1"):
        super().__init__(fault_script)
        self.keys = keys or KeyStore()
        self._listener = socket.create_server((host, 0))
        self._addr = self._listener.getsockname()
        self._ends: dict[tuple[int, int], SocketEndpoint] = {}
        self._lock = threading.Lock()

    def _connect(self, a: int, b: int):
        key = self.keys.key_for(a, b)
        out = socket.create_connection(self._addr)
        conn, _ = self._listener.accept()
        for s in (out, conn):
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._ends[(a, b)] = SocketEndpoint(out, a, b, key, self.fault_script, self)
        self._ends[(b, a)] = SocketEndpoint(conn, b, a, key, self.fault_script, self)

    def endpoint(self, party_id: int, peer_id: int) -> SocketEndpoint:
        with self._lock:
            if (party_id, peer_id) not in self._ends:
                self._connect(party_id, peer_id)
            return self._ends[(party_id, peer_id)]

    def close(self) -> None:
        for end in self._ends.values():
            end.close()
        self._listener.close()


def make_network(kind: str, fault_script: FaultScript | None = None,
                 keys: KeyStore | None = None) -> Network:
    if kind == "inproc":
        return InProcessNetwork(fault_script)
    if kind == "tcp":
        return TcpNetwork(keys, fault_script)
    raise ValueError(f"unknown transport {kind!r}; expected 'inproc' or 'tcp'")
