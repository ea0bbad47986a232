"""TCP transport: one aggregator, K clients, one round in flight.

Session: client sends HELLO(client id, n_k); per round the server sends
GLOBAL(round, params) to every client in id order, then reads one
UPDATE(round, n_k, params) from each. After the last round it sends DONE.
Any client error aborts the run before aggregation.
"""

from __future__ import annotations

import logging
import socket
import time

import numpy as np

from ..data import WindowedDataset
from ..model import ModelConfig
from ..numerics import AdamState, ParamTree
from . import wire
from .training import ClientUpdate, FedConfig, client_seed, local_train

log = logging.getLogger(__name__)

# Scalar side channel inside the UPDATE checkpoint; stripped before aggregation.
TRAIN_LOSS_KEY = "_meta.train_loss"


class ClientFailure(RuntimeError):
    pass


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


class _Session:
    def __init__(self, sock: socket.socket, max_payload: int):
        self.sock = sock
        self.stream = sock.makefile("rwb")
        self.max_payload = max_payload

    def send(self, msg: wire.WireMessage) -> None:
        wire.write_message(self.stream, msg)

    def recv(self) -> wire.WireMessage:
        return wire.read_message(self.stream, self.max_payload)

    def close(self) -> None:
        for closer in (self.stream.close, self.sock.close):
            try:
                closer()
            except OSError:
                pass


class TcpServer:
    """Aggregator side; plugs into ``run_federated`` as its ``clients`` argument."""

    def __init__(self, host: str, port: int, num_clients: int,
                 max_payload: int = wire.DEFAULT_MAX_PAYLOAD, timeout: float | None = 600.0):
        self.num_clients = num_clients
        self.max_payload = max_payload
        self.timeout = timeout
        self.listener = socket.create_server((host, port))
        self.sessions: dict[int, _Session] = {}
        self.sample_counts: dict[int, int] = {}

    @property
    def address(self) -> tuple[str, int]:
        return self.listener.getsockname()[:2]

    def accept_clients(self) -> None:
        self.listener.settimeout(self.timeout)
        while len(self.sessions) < self.num_clients:
            sock, peer = self.listener.accept()
            sock.settimeout(self.timeout)
            session = _Session(sock, self.max_payload)
            try:
                client_id, n_k = wire.parse_hello(session.recv())
            except (wire.ProtocolError, OSError) as exc:
                log.warning("rejecting %s: %s", peer, exc)
                session.close()
                continue
            if client_id in self.sessions or not 0 <= client_id < self.num_clients:
                log.warning("rejecting %s: bad or duplicate client id %d", peer, client_id)
                session.close()
                continue
            self.sessions[client_id] = session
            self.sample_counts[client_id] = n_k
            log.info("client %d connected from %s (n_k=%d)", client_id, peer, n_k)

    def train_round(self, round_id: int, global_params: ParamTree) -> list[ClientUpdate]:
        if len(self.sessions) < self.num_clients:
            self.accept_clients()
        msg = wire.global_params(round_id, global_params)
        updates = []
        try:
            for cid in sorted(self.sessions):
                self.sessions[cid].send(msg)
            # barrier: nothing is aggregated until every client has answered
            for cid in sorted(self.sessions):
                got_round, n_k, params = wire.parse_update(self.sessions[cid].recv())
                if got_round != round_id:
                    raise ClientFailure(f"client {cid} answered round {got_round}, expected {round_id}")
                loss = float(params.pop(TRAIN_LOSS_KEY, np.array(np.nan)))
                updates.append(ClientUpdate(round_id, cid, n_k, params, loss))
        except (wire.ProtocolError, OSError, ValueError) as exc:
            self.close()
            raise ClientFailure(f"round {round_id} aborted: {exc}") from exc
        return updates

    def finish(self) -> None:
        for session in self.sessions.values():
            try:
                session.send(wire.done())
            except OSError:
                pass
        self.close()

    def close(self) -> None:
        for session in self.sessions.values():
            session.close()
        self.sessions.clear()
        self.listener.close()


def _connect(host: str, port: int, timeout: float) -> socket.socket:
    deadline = time.monotonic() + timeout
    while True:
        try:
            return socket.create_connection((host, port), timeout=timeout)
        except OSError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(0.1)


def run_tcp_client(host: str, port: int, client_id: int, shard: WindowedDataset,
                   fed: FedConfig, model_config: ModelConfig, connect_timeout: float = 60.0,
                   max_payload: int = wire.DEFAULT_MAX_PAYLOAD) -> int:
    """Serve local training requests until DONE; returns the number of rounds trained."""
    sock = _connect(host, port, connect_timeout)
    sock.settimeout(None)
    session = _Session(sock, max_payload)
    state: AdamState | None = None
    rounds = 0
    try:
        session.send(wire.hello(client_id, len(shard)))
        while True:
            msg = session.recv()
            if msg.type == wire.MessageType.DONE:
                return rounds
            round_id, global_params = wire.parse_global(msg)
            upd, new_state = local_train(
                global_params, shard, fed.local_epochs, fed.hyper,
                client_seed(fed.seed, client_id, round_id), model_config, fed.batch_size,
                round_id, client_id, opt_state=state if fed.persist_optimizer else None,
                return_state=True,
            )
            if fed.persist_optimizer:
                state = new_state
            payload = upd.params.copy()
            payload[TRAIN_LOSS_KEY] = np.array(upd.train_loss)
            session.send(wire.update(round_id, upd.n_k, payload))
            rounds += 1
    finally:
        session.close()
