"""Euler--Maruyama simulation of the hidden/observed pair.

Noise is counter-based: the Gaussian increment of stream ``s`` at step ``k``
is a pure function of ``(seed, s, k)``.  A Philox block cipher keyed by
``(seed, s)`` is evaluated at counter ``k`` and the two output words are
mapped to a normal by Box--Muller.  Paths are therefore reproducible bit for
bit, independent of batch size or of which replication runs where.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError
from .model import SystemSpec

STREAM_V = 0
STREAM_W = 1
_MAGIC = b"QVP1"


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self) -> None:
        if self.N < 2:
            raise ConfigurationError("grid needs N >= 2 steps")
        if not self.T > 0:
            raise ConfigurationError("grid horizon must be positive")

    @property
    def h(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.h

    def index_at(self, t: float) -> int:
        """Index of the grid point nearest to ``t``."""
        return int(round(t / self.h))

    @classmethod
    def default(cls, T: float, eps: float, per_eps: int = 100) -> TimeGrid:
        """``N = ceil(per_eps * T / eps)`` so that ``h = eps / per_eps``."""
        return cls(T, int(math.ceil(per_eps * T / eps - 1e-9)))


def stream_key(seed: int, stream: int) -> np.ndarray:
    """128-bit Philox key for one noise stream of one replication."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream)])
    return ss.generate_state(2, dtype=np.uint64)


def normal_stream(seed: int, stream: int, count: int, start: int = 0) -> np.ndarray:
    """Standard normals ``z_start, ..., z_{start+count-1}`` of one stream.

    Step ``k`` consumes Philox output words ``2k`` and ``2k+1``; Philox
    emits four words per counter value, so a block starting at any ``start``
    is produced by jumping the counter rather than by replaying the stream.
    """
    if count <= 0:
        return np.zeros(0)
    first_word = 2 * start
    bg = np.random.Philox(key=stream_key(seed, stream))
    bg.advance(first_word // 4)
    skip = first_word % 4
    words = bg.random_raw(2 * count + skip)[skip:]
    u1 = ((words[0::2] >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    u2 = (words[1::2] >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def derive_seed(master: int, *indices: int) -> int:
    """Replication seed from a master seed and any number of indices."""
    ss = np.random.SeedSequence([int(master)] + [int(i) for i in indices])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class PathPair:
    """Simulated hidden path ``Y`` and observation ``X`` on a uniform grid.

    ``Y`` and ``X`` have shape ``(N+1,)`` for one replication or
    ``(M, N+1)`` for a batch; ``seeds`` lists the replication seeds.
    """

    grid: TimeGrid
    Y: np.ndarray | None
    X: np.ndarray
    seeds: tuple[int, ...] = ()
    streams: tuple[int, int] = (STREAM_V, STREAM_W)

    @property
    def t(self) -> np.ndarray:
        return self.grid.times

    def __getitem__(self, i: int) -> PathPair:
        """Single replication out of a batch."""
        if self.X.ndim == 1:
            raise IndexError("not a batch")
        return PathPair(self.grid, None if self.Y is None else self.Y[i], self.X[i],
                        (self.seeds[i],) if self.seeds else ())

    # -- export -------------------------------------------------------------
    def to_csv(self, path: str | Path) -> None:
        if self.X.ndim != 1:
            raise DataError("CSV export handles one replication at a time")
        Y = self.Y if self.Y is not None else np.full_like(self.X, np.nan)
        data = np.column_stack([self.t, Y, self.X])
        np.savetxt(path, data, delimiter=",", header="t,Y,X", comments="", fmt="%.17g")

    def to_binary(self, path: str | Path) -> None:
        if self.X.ndim != 1:
            raise DataError("binary export handles one replication at a time")
        Y = self.Y if self.Y is not None else np.full_like(self.X, np.nan)
        data = np.column_stack([self.t, Y, self.X]).astype("<f8")
        Path(path).write_bytes(_MAGIC + data.tobytes())


def load_path(path: str | Path) -> PathPair:
    """Read a path written by :meth:`PathPair.to_csv` or :meth:`PathPair.to_binary`."""
    raw = Path(path).read_bytes()
    if raw[:4] == _MAGIC:
        body = raw[4:]
        if len(body) % 24:
            raise DataError("binary path frame is truncated")
        data = np.frombuffer(body, dtype="<f8").reshape(-1, 3)
    else:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t, Y, X = data[:, 0], data[:, 1], data[:, 2]
    if len(t) < 3:
        raise DataError("path needs at least 3 samples")
    h = np.diff(t)
    if np.max(np.abs(h - h.mean())) > 1e-9 * max(1.0, t[-1]):
        raise DataError("path time stamps are not uniform")
    grid = TimeGrid(float(t[-1]), len(t) - 1)
    return PathPair(grid, None if np.all(np.isnan(Y)) else Y.copy(), X.copy())


def simulate_batch(spec: SystemSpec, grid: TimeGrid, seeds) -> PathPair:
    """Simulate one replication per seed; rows are independent of batch size."""
    seeds = tuple(int(s) for s in seeds)
    th = spec.resolve_theta()
    h = grid.h
    tk = grid.times[:-1]
    a = np.broadcast_to(spec.a.value(tk, th), tk.shape)
    b = np.broadcast_to(spec.b.value(tk, th), tk.shape)
    f = np.broadcast_to(spec.f.value(tk, th), tk.shape)
    sg = np.broadcast_to(spec.sigma(tk), tk.shape)
    sqh = math.sqrt(h)
    M, N = len(seeds), grid.N
    dV = np.empty((N, M))
    dW = np.empty((N, M))
    for j, s in enumerate(seeds):
        dV[:, j] = sqh * normal_stream(s, STREAM_V, N)
        dW[:, j] = sqh * normal_stream(s, STREAM_W, N)
    Y = np.zeros((N + 1, M))
    decay = 1.0 - a * h
    for k in range(N):
        Y[k + 1] = decay[k] * Y[k] + b[k] * dV[k]
    dX = f[:, None] * Y[:-1] * h + (spec.eps * sg)[:, None] * dW
    X = np.zeros((N + 1, M))
    np.cumsum(dX, axis=0, out=X[1:])
    return PathPair(grid, np.ascontiguousarray(Y.T), np.ascontiguousarray(X.T), seeds)


def simulate(spec: SystemSpec, grid: TimeGrid, seed: int) -> PathPair:
    """One replication of the Euler--Maruyama scheme::

        Y[k+1] = Y[k] - a(t_k) Y[k] h + b(t_k) dV_k
        X[k+1] = X[k] + f(t_k) Y[k] h + eps sigma(t_k) dW_k
    """
    pp = simulate_batch(spec, grid, [seed])
    return pp[0]


def derivative_oracle(path: PathPair, spec: SystemSpec) -> np.ndarray:
    """``N_k = f(t_k) Y_k``; needs the hidden path, so simulation only."""
    if path.Y is None:
        raise DataError("hidden path not available")
    th = spec.resolve_theta()
    return spec.f.value(path.t, th) * path.Y


def realized_qv_oracle(path: PathPair, spec: SystemSpec, tau: float) -> np.ndarray | float:
    """Realized quadratic variation of ``N`` over steps with ``t_{k+1} <= tau``."""
    Nk = derivative_oracle(path, spec)
    kmax = int(math.floor(tau / path.grid.h + 1e-9))
    d = np.diff(Nk[..., : kmax + 1], axis=-1)
    out = np.sum(d * d, axis=-1)
    return float(out) if np.ndim(out) == 0 else out
