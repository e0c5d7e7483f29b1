"""The distributed compute algorithm (DCA) for differentially private sums.

Each client adds its own small Gaussian noise to its vector, encodes it in
fixed point and splits it into ``M`` blinded messages, one per compute
node.  Message 1 carries ``encode(z + eta) + r_1``; messages 2..M carry
the blinding vectors ``r_k``, and the ``r_k`` sum to zero.  Every compute
node sums what it received and publishes the result.  Adding the ``M``
partials cancels the blinding and leaves ``sum_i (z_i + eta_i)``.

The module has three layers:

* pure per-party steps (:func:`client_prepare`, :func:`compute_aggregate`,
  :func:`reconcile_participants`, :func:`final_sum`);
* party state machines driven over a :mod:`distdp.transport` network by
  :func:`run_round`;
* :func:`simulate_round`, a vectorised in-memory execution of the same
  arithmetic for large simulations.
"""

from __future__ import annotations

import enum
import logging
import struct
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import fixedpoint as fp
from .dp import distributed_sigma, sample_gaussian_noise
from .errors import (
    ConfigError,
    DimensionMismatch,
    DuplicateClient,
    FaultInjected,
    InconsistentPartials,
    InsufficientClients,
    Timeout,
    TooManyDropouts,
)
from .fixedpoint import FixedPointParams, FixedPointVector

log = logging.getLogger(__name__)

COMPUTE_BASE = 0x8000_0000
AGGREGATOR_ID = 0xFFFF_FFFF


def compute_id(k: int) -> int:
    """Wire id of compute node ``k`` (0-based)."""
    return COMPUTE_BASE + k


@dataclass(frozen=True)
class ProtocolConfig:
    n_clients: int
    n_compute: int
    collusion_tolerance: int
    dimension: int
    fp_params: FixedPointParams = fp.DEFAULT_PARAMS
    sigma_client: float = 0.0
    timeout: float = 0.05

    def __post_init__(self):
        if self.n_compute < 2:
            raise ConfigError(
                f"need at least 2 compute nodes, got {self.n_compute}; a single node "
                "would see every client's data"
            )
        if self.collusion_tolerance < 0:
            raise ConfigError("collusion tolerance must be nonnegative")
        if self.n_clients - self.collusion_tolerance - 1 < 1:
            raise InsufficientClients(
                f"need N > T + 1, got N={self.n_clients}, T={self.collusion_tolerance}"
            )
        if not 0 < self.n_clients < COMPUTE_BASE:
            raise ConfigError(f"client count out of range: {self.n_clients}")
        if self.dimension < 1:
            raise ConfigError(f"dimension must be positive, got {self.dimension}")
        if self.sigma_client < 0:
            raise ConfigError("sigma_client must be nonnegative")

    @classmethod
    def calibrated(cls, n_clients: int, n_compute: int, collusion_tolerance: int,
                   dimension: int, sigma_std: float, **kw) -> "ProtocolConfig":
        """Config whose per-client noise covers ``sigma_std`` under the given T."""
        plan = distributed_sigma(sigma_std, n_clients, collusion_tolerance)
        return cls(n_clients, n_compute, collusion_tolerance, dimension,
                   sigma_client=plan.sigma_client, **kw)

    @property
    def T(self) -> int:
        return self.collusion_tolerance

    @property
    def client_ids(self) -> frozenset:
        return frozenset(range(self.n_clients))


@dataclass(frozen=True)
class ClientMessageSet:
    round_id: int
    client_id: int
    messages: tuple[FixedPointVector, ...]


@dataclass(frozen=True)
class ComputePartial:
    compute_id: int
    round_id: int
    contributing_clients: frozenset
    q: FixedPointVector


@dataclass(frozen=True)
class RoundResult:
    dp_sum: np.ndarray
    participating_clients: frozenset
    dropped_clients: frozenset
    round_id: int = 0
    messages_per_node: Mapping[int, int] = field(default_factory=dict)


# Wire format ---------------------------------------------------------------

class MessageKind(enum.IntEnum):
    CLIENT_SHARE = 1
    COMPUTE_PARTIAL = 2
    PARTICIPANT_SET = 3
    ABORT = 4


_HEADER = struct.Struct("<QIIB")


def _pack_ids(ids: Iterable[int]) -> bytes:
    ids = sorted(ids)
    return struct.pack(f"<I{len(ids)}I", len(ids), *ids)


def _unpack_ids(data: bytes, offset: int = 0):
    (count,) = struct.unpack_from("<I", data, offset)
    ids = struct.unpack_from(f"<{count}I", data, offset + 4)
    return frozenset(ids), offset + 4 + 4 * count


@dataclass(frozen=True)
class Message:
    """One protocol frame.

    Layout: u64 round_id, u32 sender, u32 recipient, u8 kind (all little
    endian), then the body.  Shares are a serialised vector; partials are a
    vector followed by the client-id list; participant sets and aborts
    carry only an id list.
    """

    round_id: int
    sender: int
    recipient: int
    kind: MessageKind
    vector: FixedPointVector | None = None
    ids: frozenset | None = None

    def to_bytes(self) -> bytes:
        out = [_HEADER.pack(self.round_id, self.sender, self.recipient, int(self.kind))]
        if self.kind in (MessageKind.CLIENT_SHARE, MessageKind.COMPUTE_PARTIAL):
            out.append(self.vector.to_bytes())
        if self.kind is not MessageKind.CLIENT_SHARE:
            out.append(_pack_ids(self.ids or ()))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Message":
        round_id, sender, recipient, kind = _HEADER.unpack_from(data)
        kind = MessageKind(kind)
        offset = _HEADER.size
        vector = ids = None
        if kind in (MessageKind.CLIENT_SHARE, MessageKind.COMPUTE_PARTIAL):
            vector, offset = FixedPointVector.read_from(data, offset)
        if kind is not MessageKind.CLIENT_SHARE:
            ids, offset = _unpack_ids(data, offset)
        if offset != len(data):
            raise ValueError(f"{len(data) - offset} trailing bytes in {kind.name} frame")
        return cls(round_id, sender, recipient, kind, vector, ids)


# Per-party steps -----------------------------------------------------------

def _noisy_input(z, config: ProtocolConfig, rng) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != config.dimension:
        raise DimensionMismatch(f"input has dimension {z.shape[-1]}, config says {config.dimension}")
    if not np.all(np.isfinite(z)) or (z.size and np.max(np.abs(z)) >= config.fp_params.bound):
        raise OverflowError("client input outside the fixed-point range")
    eta = sample_gaussian_noise(config.sigma_client, z.shape, rng)
    # overflowing noise is clipped rather than raising
    return fp.clip_to_range(z + eta, config.fp_params)


def client_prepare(z, config: ProtocolConfig, rng=None, *, client_id: int = 0,
                   round_id: int = 0) -> ClientMessageSet:
    """Noise, encode and blind one client's vector.

    The Gaussian noise is drawn from ``rng`` before the blinding words, so a
    generator seeded identically reproduces the client's noise.  With
    ``rng=None`` the noise comes from a fresh OS-seeded generator and the
    blinding words from ``os.urandom``.
    """
    noise_rng = np.random.default_rng() if rng is None else rng
    x = _noisy_input(z, config, noise_rng)
    params = config.fp_params
    shares = fp.blinding_shares(config.dimension, config.n_compute, params, rng)
    shares[0] = (shares[0] + fp.encode_array(x, params)) & params.mask
    messages = tuple(FixedPointVector(s, params) for s in shares)
    return ClientMessageSet(round_id, client_id, messages)


def compute_aggregate(messages: Sequence[tuple[int, FixedPointVector]], config: ProtocolConfig,
                      *, compute_id: int = COMPUTE_BASE, round_id: int = 0) -> ComputePartial:
    """Sum the messages one compute node received."""
    seen = set()
    for cid, vec in messages:
        if cid in seen:
            raise DuplicateClient(f"client {cid} sent more than one message to node {compute_id}")
        seen.add(cid)
        if vec.dimension != config.dimension or vec.params != config.fp_params:
            raise DimensionMismatch(
                f"message from client {cid} has dimension {vec.dimension}, expected {config.dimension}"
            )
    q = fp.sum_vectors((v for _, v in messages), config.dimension, config.fp_params)
    return ComputePartial(compute_id, round_id, frozenset(seen), q)


def _check_dropouts(agreed: frozenset, config: ProtocolConfig):
    dropped = config.client_ids - agreed
    if len(dropped) > config.collusion_tolerance:
        raise TooManyDropouts(dropped, config.collusion_tolerance)


def reconcile_participants(partials: Sequence[ComputePartial], config: ProtocolConfig) -> frozenset:
    """Clients seen by every compute node; the rest count as dropped.

    Raises TooManyDropouts when more than T clients fall outside the set.
    """
    if len(partials) != config.n_compute:
        raise InconsistentPartials(f"expected {config.n_compute} partials, got {len(partials)}")
    agreed = frozenset.intersection(*(frozenset(p.contributing_clients) for p in partials))
    _check_dropouts(agreed, config)
    return agreed


def final_sum(partials: Sequence[ComputePartial], config: ProtocolConfig) -> RoundResult:
    """Add the compute partials, cancelling the blinding."""
    if len(partials) != config.n_compute:
        raise InconsistentPartials(f"expected {config.n_compute} partials, got {len(partials)}")
    rounds = {p.round_id for p in partials}
    if len(rounds) != 1:
        raise InconsistentPartials(f"partials come from different rounds: {sorted(rounds)}")
    if len({p.compute_id for p in partials}) != len(partials):
        raise InconsistentPartials("two partials from the same compute node")
    sets = {frozenset(p.contributing_clients) for p in partials}
    if len(sets) != 1:
        raise InconsistentPartials("partials were summed over different client sets")
    for p in partials:
        if p.q.dimension != config.dimension or p.q.params != config.fp_params:
            raise InconsistentPartials(f"partial from node {p.compute_id} has the wrong shape")
    (agreed,) = sets
    _check_dropouts(agreed, config)
    total = fp.sum_vectors([p.q for p in partials])
    return RoundResult(
        dp_sum=fp.decode(total),
        participating_clients=agreed,
        dropped_clients=config.client_ids - agreed,
        round_id=rounds.pop(),
    )


# Parties over a transport --------------------------------------------------

class Client:
    def __init__(self, client_id: int, z, config: ProtocolConfig, network, rng=None):
        self.client_id = client_id
        self.z = z
        self.config = config
        self.rng = rng
        self.links = {k: network.endpoint(client_id, compute_id(k)) for k in range(config.n_compute)}
        self.crashed = False

    def run(self, round_id: int):
        prepared = client_prepare(self.z, self.config, self.rng,
                                  client_id=self.client_id, round_id=round_id)
        for k, vec in enumerate(prepared.messages):
            msg = Message(round_id, self.client_id, compute_id(k), MessageKind.CLIENT_SHARE, vec)
            try:
                self.links[k].send(msg.to_bytes())
            except FaultInjected as exc:
                log.info("client %d stopped: %s", self.client_id, exc)
                self.crashed = True
                return


class ComputeNode:
    """Collects shares, agrees on the participant set, publishes its partial."""

    def __init__(self, k: int, config: ProtocolConfig, network):
        self.k = k
        self.id = compute_id(k)
        self.config = config
        self.client_links = {i: network.endpoint(self.id, i) for i in range(config.n_clients)}
        self.peer_links = {compute_id(j): network.endpoint(self.id, compute_id(j))
                           for j in range(config.n_compute) if j != k}
        self.aggregator_link = network.endpoint(self.id, AGGREGATOR_ID)
        self.received: dict[int, FixedPointVector] = {}
        self.crashed = False

    def _send(self, link, msg: Message):
        if self.crashed:
            return
        try:
            link.send(msg.to_bytes())
        except FaultInjected as exc:
            log.info("compute node %d stopped: %s", self.k, exc)
            self.crashed = True

    def _recv_message(self, link, deadline: float, round_id: int, kind: MessageKind):
        while True:
            frame = link.recv_with_timeout(max(deadline - time.monotonic(), 0.0))
            msg = Message.from_bytes(frame)
            if msg.round_id == round_id and msg.kind is kind:
                return msg
            log.debug("node %d discarding stale %s frame", self.k, msg.kind.name)

    def collect(self, round_id: int):
        deadline = time.monotonic() + self.config.timeout
        self.received = {}
        for cid, link in self.client_links.items():
            try:
                msg = self._recv_message(link, deadline, round_id, MessageKind.CLIENT_SHARE)
            except Timeout:
                continue
            self.received[cid] = msg.vector
        partial = compute_aggregate(list(self.received.items()), self.config,
                                    compute_id=self.id, round_id=round_id)
        for peer, link in self.peer_links.items():
            self._send(link, Message(round_id, self.id, peer, MessageKind.PARTICIPANT_SET,
                                     ids=partial.contributing_clients))
        return partial

    def publish(self, round_id: int, own: ComputePartial):
        if self.crashed:
            return
        deadline = time.monotonic() + self.config.timeout
        partials = [own]
        for peer, link in self.peer_links.items():
            msg = self._recv_message(link, deadline, round_id, MessageKind.PARTICIPANT_SET)
            # only the client sets matter for reconciliation
            partials.append(ComputePartial(peer, round_id, msg.ids, own.q))
        try:
            agreed = reconcile_participants(partials, self.config)
        except TooManyDropouts as exc:
            self._send(self.aggregator_link,
                       Message(round_id, self.id, AGGREGATOR_ID, MessageKind.ABORT, ids=exc.dropped))
            return
        restricted = compute_aggregate([(c, self.received[c]) for c in sorted(agreed)], self.config,
                                       compute_id=self.id, round_id=round_id)
        self._send(self.aggregator_link,
                   Message(round_id, self.id, AGGREGATOR_ID, MessageKind.COMPUTE_PARTIAL,
                           restricted.q, restricted.contributing_clients))


class Aggregator:
    def __init__(self, config: ProtocolConfig, network):
        self.config = config
        self.links = {compute_id(k): network.endpoint(AGGREGATOR_ID, compute_id(k))
                      for k in range(config.n_compute)}

    def finish(self, round_id: int, timeout: float) -> RoundResult:
        deadline = time.monotonic() + timeout
        partials = []
        for node, link in self.links.items():
            while True:
                try:
                    frame = link.recv_with_timeout(max(deadline - time.monotonic(), 0.0))
                except Timeout:
                    raise Timeout(f"no partial from compute node {node - COMPUTE_BASE}") from None
                msg = Message.from_bytes(frame)
                if msg.round_id == round_id:
                    break
            if msg.kind is MessageKind.ABORT:
                raise TooManyDropouts(msg.ids, self.config.collusion_tolerance)
            if msg.kind is not MessageKind.COMPUTE_PARTIAL:
                raise InconsistentPartials(f"unexpected {msg.kind.name} from node {node}")
            partials.append(ComputePartial(msg.sender, round_id, msg.ids, msg.vector))
        return final_sum(partials, self.config)


def client_generators(rng, n_clients: int):
    """Independent per-client generators derived from ``rng`` (None stays None)."""
    if rng is None:
        return [None] * n_clients
    return rng.spawn(n_clients)


def run_round(client_inputs, config: ProtocolConfig, network, rng=None, *,
              round_id: int = 0) -> RoundResult:
    """Run one full round: prepare, send, aggregate, reconcile, publish, sum.

    ``rng`` seeds the per-client generators through ``rng.spawn``; pass
    ``None`` for OS randomness.  Parties run one after the other in this
    thread, so missing messages cost one ``config.timeout`` per phase.
    """
    client_inputs = np.asarray(client_inputs, dtype=np.float64)
    if client_inputs.shape != (config.n_clients, config.dimension):
        raise DimensionMismatch(
            f"expected inputs of shape {(config.n_clients, config.dimension)}, "
            f"got {client_inputs.shape}"
        )
    before = dict(network.frames_delivered)
    rngs = client_generators(rng, config.n_clients)
    clients = [Client(i, client_inputs[i], config, network, rngs[i]) for i in range(config.n_clients)]
    nodes = [ComputeNode(k, config, network) for k in range(config.n_compute)]
    aggregator = Aggregator(config, network)

    for c in clients:
        c.run(round_id)
    partials = [node.collect(round_id) for node in nodes]
    for node, own in zip(nodes, partials):
        node.publish(round_id, own)
    result = aggregator.finish(round_id, config.timeout)
    counts = {k: len(node.received) for k, node in enumerate(nodes)}
    log.debug("round %d frames delivered: %d", round_id,
              sum(network.frames_delivered.values()) - sum(before.values()))
    return RoundResult(result.dp_sum, result.participating_clients, result.dropped_clients,
                       round_id, counts)


# Vectorised simulation -----------------------------------------------------

_CHUNK_WORDS = 1 << 22


def simulate_round(client_inputs, config: ProtocolConfig, rng=None, *,
                   dropped: Iterable[int] = (), round_id: int = 0) -> RoundResult:
    """Execute the round arithmetic for all clients with array operations.

    Produces the same messages-then-partials computation as
    :func:`run_round`, without serialisation or transport, processing
    clients in chunks to bound memory.  ``dropped`` lists clients whose
    messages never arrive.
    """
    Z = np.asarray(client_inputs, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != config.dimension or Z.shape[0] != config.n_clients:
        raise DimensionMismatch(
            f"expected inputs of shape {(config.n_clients, config.dimension)}, got {Z.shape}"
        )
    dropped = frozenset(dropped)
    _check_dropouts(config.client_ids - dropped, config)
    params, M, d = config.fp_params, config.n_compute, config.dimension
    noise_rng = np.random.default_rng() if rng is None else rng
    keep = np.ones(config.n_clients, dtype=bool)
    keep[list(dropped)] = False

    q = np.zeros((M, d), dtype=np.uint64)
    chunk = max(1, _CHUNK_WORDS // (M * d))
    for start in range(0, config.n_clients, chunk):
        stop = min(start + chunk, config.n_clients)
        x = _noisy_input(Z[start:stop], config, noise_rng)
        encoded = fp.encode_array(x, params)
        n = stop - start
        # messages[i, k] is what client i sends to node k
        messages = np.empty((n, M, d), dtype=np.uint64)
        messages[:, :M - 1] = fp.random_words((n, M - 1, d), params, rng)
        messages[:, M - 1] = (np.uint64(0) - fp.modsum(messages[:, :M - 1], 1, params)) & params.mask
        messages[:, 0] = (messages[:, 0] + encoded) & params.mask
        received = messages[keep[start:stop]]
        q = (q + fp.modsum(received, 0, params)) & params.mask

    total = fp.modsum(q, 0, params)
    agreed = config.client_ids - dropped
    return RoundResult(
        dp_sum=fp.decode_array(total, params),
        participating_clients=agreed,
        dropped_clients=dropped,
        round_id=round_id,
        messages_per_node={k: len(agreed) for k in range(M)},
    )
