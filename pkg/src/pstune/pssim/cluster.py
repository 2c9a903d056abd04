"""Sharded parameter storage with lazy (on-demand) relocation.

Every parameter lives on exactly one authoritative server. While a
relocation is active, a moved parameter keeps being served from its source
until the first push carrying its original value reaches the destination;
that push materializes ``original + buffered + update`` there and retires
the source copy. Later pushes are applied as plain updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ProtocolError, ValidationError


@dataclass(frozen=True)
class Normal:
    u: float


@dataclass(frozen=True)
class Relocating:
    o: float
    u: float


PushMessage = Normal | Relocating


def even_owner(n_params: int, n_servers: int) -> np.ndarray:
    """Contiguous, as-even-as-possible assignment of parameters to servers."""
    if n_servers < 1:
        raise ValidationError("need at least one server")
    return np.repeat(np.arange(n_servers), [len(c) for c in np.array_split(np.arange(n_params), n_servers)])


def rebalance_owner(owner: np.ndarray, n_servers: int) -> np.ndarray:
    """Reassign parameters to ``n_servers`` servers, moving as few as possible.

    Target shard sizes are as even as possible. Surviving servers keep the
    lowest-indexed parameters they already hold; everything else is handed,
    in index order, to servers below their target.
    """
    owner = np.asarray(owner)
    n = len(owner)
    sizes = np.array([len(c) for c in np.array_split(np.arange(n), n_servers)])
    new = np.full(n, -1)
    for s in range(n_servers):
        held = np.flatnonzero(owner == s)
        keep = held[: sizes[s]]
        new[keep] = s
    free = np.flatnonzero(new < 0)
    pos = 0
    for s in range(n_servers):
        need = sizes[s] - int(np.count_nonzero(new == s))
        new[free[pos:pos + need]] = s
        pos += need
    return new


class ParameterStore:
    def __init__(self, w0: np.ndarray, owner: np.ndarray, n_servers: int | None = None):
        self.values = np.array(w0, dtype=np.float64)
        self.owner = np.array(owner, dtype=np.int64)
        if self.owner.shape != self.values.shape:
            raise ValidationError("owner map must cover every parameter")
        n = len(self.values)
        self.source = np.full(n, -1, dtype=np.int64)
        self.pending = np.zeros(n, dtype=bool)
        self.relocated = np.zeros(n, dtype=bool)
        self.delta = np.zeros(n)
        self.materialized = np.zeros(n, dtype=np.int64)
        self.epoch = 0
        self.n_servers = int(n_servers if n_servers is not None else self.owner.max() + 1)

    @property
    def n_params(self) -> int:
        return len(self.values)

    @property
    def num_servers(self) -> int:
        return self.n_servers

    @property
    def relocating(self) -> bool:
        return bool(self.pending.any())

    def authoritative(self) -> np.ndarray:
        """Server currently answering pulls for each parameter."""
        return np.where(self.pending, self.source, self.owner)

    def shard(self, server: int) -> np.ndarray:
        return np.flatnonzero(self.authoritative() == server)

    def model(self) -> np.ndarray:
        """Current logical model, counting updates buffered at destinations."""
        if not self.pending.any():
            return self.values.copy()
        return self.values + np.where(self.pending, self.delta, 0.0)

    def pull(self) -> tuple[np.ndarray, int]:
        return self.values.copy(), self.epoch

    def push(self, update: np.ndarray, pulled: np.ndarray, pulled_epoch: int, idx=None) -> None:
        """Apply a worker's update for parameters ``idx`` (default: all).

        ``pulled`` is the vector the worker computed from; for parameters
        under relocation it supplies the original value when the pull was
        made under the current routing.
        """
        if idx is None:
            if not self.pending.any():
                self.values += update
                return
            idx = np.arange(self.n_params)
        idx = np.asarray(idx)
        update = np.asarray(update, dtype=np.float64)
        pend = self.pending[idx]
        if not pend.any():
            self.values[idx] += update
            return
        plain = idx[~pend]
        self.values[plain] += update[~pend]
        moving = idx[pend]
        u = update[pend]
        if pulled_epoch == self.epoch:
            o = np.asarray(pulled)[moving]
            self.values[moving] = o + self.delta[moving] + u
            self._retire(moving)
        else:
            # computed before the routing change: no valid original, buffer it
            self.delta[moving] += u

    def receive(self, server: int, param: int, msg: PushMessage) -> None:
        """Deliver a single push message to ``server``."""
        if self.owner[param] != server:
            raise ProtocolError(f"server {server} does not own parameter {param}")
        if isinstance(msg, Relocating):
            if not self.relocated[param]:
                raise ProtocolError(f"parameter {param} has no active relocation")
            if self.pending[param]:
                self.values[param] = msg.o + self.delta[param] + msg.u
                self._retire(np.array([param]))
            else:
                self.values[param] += msg.u
        elif self.pending[param]:
            self.delta[param] += msg.u
        else:
            self.values[param] += msg.u

    def serve(self, param: int) -> tuple[int, float]:
        """(server, value) answering a pull of ``param``."""
        return int(self.authoritative()[param]), float(self.values[param])

    def _retire(self, params: np.ndarray) -> None:
        self.delta[params] = 0.0
        self.pending[params] = False
        self.source[params] = -1
        self.materialized[params] += 1

    def begin_relocation(self, new_owner: np.ndarray, n_servers: int | None = None) -> np.ndarray:
        """Switch routing to ``new_owner`` lazily; returns the moved parameters."""
        self.finalize()
        new_owner = np.asarray(new_owner, dtype=np.int64)
        moved = np.flatnonzero(new_owner != self.owner)
        self.relocated[:] = False
        self.materialized[:] = 0
        self.source[moved] = self.owner[moved]
        self.pending[moved] = True
        self.relocated[moved] = True
        self.owner = new_owner.copy()
        self.n_servers = int(n_servers if n_servers is not None else new_owner.max() + 1)
        self.epoch += 1
        return moved

    def finalize(self) -> np.ndarray:
        """Materialize every still-pending parameter at its destination."""
        left = np.flatnonzero(self.pending)
        if len(left):
            self.values[left] += self.delta[left]
            self._retire(left)
        return left

    def rebuild(self, new_owner: np.ndarray, n_servers: int | None = None) -> None:
        """Checkpoint-and-restore relocation: everything moves at once."""
        self.finalize()
        self.relocated[:] = False
        self.materialized[:] = 0
        self.owner = np.asarray(new_owner, dtype=np.int64).copy()
        self.n_servers = int(n_servers if n_servers is not None else self.owner.max() + 1)
        self.epoch += 1

    def check(self) -> None:
        """Assert the shard invariants."""
        auth = self.authoritative()
        if np.any(auth < 0):
            raise ProtocolError("a parameter has no authoritative server")
        counts = np.bincount(auth, minlength=self.num_servers)
        if counts.sum() != self.n_params:
            raise ProtocolError("shards do not partition the model")
        if np.any(self.materialized > 1):
            raise ProtocolError("an original value was counted more than once")
