"""Continuous-time finite-state Markov chain.

Exact simulation (exponential holding times, embedded jump chain), the
counting and compensator processes attached to each ordered pair of
states, and transition probabilities exp(Qt).

Seeding
-------
Every path owns its random streams.  Stream ``s`` of path ``i`` under the
master seed ``seed`` is::

    numpy.random.SeedSequence(entropy=seed, spawn_key=(i, s))

fed to a PCG64 bit generator.  Stream 0 drives the chain, stream 1 the
Brownian increments.  Because the derivation only depends on the path
index, chunked or threaded simulation reproduces serial runs bit for bit.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import expm

from .errors import ConfigurationError, DomainError

CHAIN_STREAM = 0
BROWNIAN_STREAM = 1
CHUNK_SIZE = 2048
ROW_SUM_TOL = 1e-12


def path_rng(seed: int, path_index: int, stream: int) -> np.random.Generator:
    """Random generator for one (path, stream) pair."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(path_index), int(stream)))
    return np.random.Generator(np.random.PCG64(ss))


def run_chunked(n_items: int, work: Callable[[int, int], None], threads: int = 1) -> None:
    """Call ``work(start, stop)`` over fixed-size chunks of ``range(n_items)``.

    Chunk boundaries do not depend on ``threads``; ``work`` must only write
    to its own slice.
    """
    bounds = [(s, min(s + CHUNK_SIZE, n_items)) for s in range(0, n_items, CHUNK_SIZE)]
    if threads <= 1 or len(bounds) <= 1:
        for start, stop in bounds:
            work(start, stop)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for fut in [pool.submit(work, s, e) for s, e in bounds]:
            fut.result()


@dataclass(frozen=True)
class GeneratorMatrix:
    """Generator Q = (q_ij) of a chain on states 0..d-1 (rates per unit time)."""

    entries: NDArray[np.float64]

    def __init__(self, entries: ArrayLike):
        q = np.array(entries, dtype=np.float64)
        if q.ndim == 0:
            q = q.reshape(1, 1)
        if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] < 1:
            raise ConfigurationError(f"generator must be a non-empty square matrix, got shape {q.shape}")
        if not np.all(np.isfinite(q)):
            raise ConfigurationError("generator entries must be finite")
        off = q - np.diag(np.diag(q))
        if np.any(off < 0):
            i, j = np.argwhere(off < 0)[0]
            raise ConfigurationError(f"negative off-diagonal rate q[{i},{j}] = {q[i, j]}")
        rows = q.sum(axis=1)
        if np.any(np.abs(rows) > ROW_SUM_TOL):
            i = int(np.argmax(np.abs(rows)))
            raise ConfigurationError(f"row {i} of generator sums to {rows[i]:.3e}, expected 0")
        q.setflags(write=False)
        object.__setattr__(self, "entries", q)

    @property
    def d(self) -> int:
        return self.entries.shape[0]

    def exit_rate(self, i: int) -> float:
        return float(-self.entries[i, i])

    def jump_distribution(self, i: int) -> NDArray[np.float64]:
        """Embedded-chain probabilities of the next state from ``i``."""
        rate = self.exit_rate(i)
        probs = np.clip(self.entries[i], 0.0, None)
        probs[i] = 0.0
        if rate <= 0:
            return probs
        return probs / probs.sum()

    def to_list(self) -> list[list[float]]:
        return self.entries.tolist()


@dataclass(frozen=True)
class RegimePath:
    """Exact record of one chain trajectory on [0, horizon]."""

    initial_state: int
    jump_times: NDArray[np.float64]
    new_states: NDArray[np.int64]
    horizon: float
    _states: NDArray[np.int64] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        times = np.asarray(self.jump_times, dtype=np.float64)
        states = np.asarray(self.new_states, dtype=np.int64)
        if times.shape != states.shape:
            raise ConfigurationError("jump_times and new_states must have equal length")
        if times.size:
            if times[0] <= 0 or times[-1] > self.horizon or np.any(np.diff(times) <= 0):
                raise ConfigurationError("jump times must be strictly increasing in (0, T]")
        seq = np.concatenate(([self.initial_state], states)).astype(np.int64)
        if np.any(seq[1:] == seq[:-1]):
            raise ConfigurationError("consecutive states of a regime path must differ")
        object.__setattr__(self, "jump_times", times)
        object.__setattr__(self, "new_states", states)
        object.__setattr__(self, "_states", seq)

    @property
    def n_jumps(self) -> int:
        return int(self.jump_times.size)

    def state(self, t: ArrayLike) -> NDArray[np.int64] | int:
        """Right-continuous value alpha(t)."""
        idx = np.searchsorted(self.jump_times, t, side="right")
        out = self._states[idx]
        return int(out) if np.ndim(out) == 0 else out

    def state_before(self, t: ArrayLike) -> NDArray[np.int64] | int:
        """Left limit alpha(t-); alpha(0-) is the initial state."""
        idx = np.searchsorted(self.jump_times, t, side="left")
        out = self._states[idx]
        return int(out) if np.ndim(out) == 0 else out

    def sojourns(self, t_end: float | None = None) -> list[tuple[int, float]]:
        """(state, duration) pieces covering [0, t_end]."""
        t_end = self.horizon if t_end is None else t_end
        pieces = []
        start = 0.0
        for k, state in enumerate(self._states):
            stop = self.jump_times[k] if k < self.n_jumps else np.inf
            stop = min(stop, t_end)
            if stop > start:
                pieces.append((int(state), float(stop - start)))
            start = stop
            if start >= t_end:
                break
        return pieces


@dataclass(frozen=True)
class CountingRecord:
    """[Q_ij](t) jump counts and occupation times up to time t."""

    t: float
    jump_counts: NDArray[np.int64]
    occupation_times: NDArray[np.float64]

    def compensator(self, Q: GeneratorMatrix) -> NDArray[np.float64]:
        """<Q_ij>(t) = q_ij * occupation time of i, zero on the diagonal."""
        comp = Q.entries * self.occupation_times[:, None]
        np.fill_diagonal(comp, 0.0)
        return comp

    def compensated(self, Q: GeneratorMatrix) -> NDArray[np.float64]:
        """Martingale values Q_ij(t) = [Q_ij](t) - <Q_ij>(t)."""
        return self.jump_counts - self.compensator(Q)


def simulate_chain(Q: GeneratorMatrix, i0: int, T: float, rng: np.random.Generator) -> RegimePath:
    """Draw one exact chain path on [0, T] started at ``i0``."""
    if not 0 <= i0 < Q.d:
        raise DomainError(f"initial state {i0} outside 0..{Q.d - 1}")
    if not T > 0:
        raise DomainError(f"horizon must be positive, got {T}")
    times: list[float] = []
    states: list[int] = []
    t, state = 0.0, int(i0)
    while True:
        rate = Q.exit_rate(state)
        if rate <= 0:
            break
        t += rng.exponential(1.0 / rate)
        if t > T:
            break
        targets = np.flatnonzero(Q.entries[state] > 0)
        targets = targets[targets != state]
        if targets.size == 1:
            state = int(targets[0])
        else:
            cdf = np.cumsum(Q.jump_distribution(state)[targets])
            pick = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            state = int(targets[min(pick, targets.size - 1)])
        times.append(t)
        states.append(state)
    return RegimePath(int(i0), np.array(times), np.array(states, dtype=np.int64), float(T))


def simulate_chains(
    Q: GeneratorMatrix,
    i0: int,
    T: float,
    n_paths: int,
    seed: int,
    threads: int = 1,
    offset: int = 0,
) -> list[RegimePath]:
    """Simulate ``n_paths`` independent paths with per-path streams.

    Path ``k`` uses the stream of path index ``offset + k``.
    """
    if n_paths < 1:
        raise DomainError("n_paths must be >= 1")
    if not 0 <= i0 < Q.d:
        raise DomainError(f"initial state {i0} outside 0..{Q.d - 1}")
    out: list[RegimePath | None] = [None] * n_paths
    if Q.exit_rate(i0) <= 0:
        empty = RegimePath(int(i0), np.empty(0), np.empty(0, dtype=np.int64), float(T))
        return [empty] * n_paths

    def work(start: int, stop: int) -> None:
        for k in range(start, stop):
            out[k] = simulate_chain(Q, i0, T, path_rng(seed, offset + k, CHAIN_STREAM))

    run_chunked(n_paths, work, threads)
    return out  # type: ignore[return-value]


def counting_record(path: RegimePath, Q: GeneratorMatrix, t: float) -> CountingRecord:
    if not 0 <= t <= path.horizon:
        raise DomainError(f"t={t} outside [0, {path.horizon}]")
    counts = np.zeros((Q.d, Q.d), dtype=np.int64)
    prev = path.initial_state
    for time, new in zip(path.jump_times, path.new_states):
        if time > t:
            break
        counts[prev, new] += 1
        prev = new
    occ = np.zeros(Q.d)
    for state, dur in path.sojourns(t):
        occ[state] += dur
    return CountingRecord(float(t), counts, occ)


def transition_probability(Q: GeneratorMatrix, t: float) -> NDArray[np.float64]:
    """exp(Qt) by Pade scaling-and-squaring."""
    if t < 0:
        raise DomainError(f"t must be >= 0, got {t}")
    P = expm(Q.entries * t)
    return np.clip(P, 0.0, None)


def regimes_on_grid(paths: Sequence[RegimePath], grid: NDArray[np.float64]) -> tuple[NDArray, NDArray]:
    """alpha(t_j) and alpha(t_j-) on a time grid, shape (P, N+1) each."""
    n = len(paths)
    right = np.empty((n, grid.size), dtype=np.int32)
    left = np.empty((n, grid.size), dtype=np.int32)
    for k, path in enumerate(paths):
        if path.n_jumps == 0:
            right[k] = path.initial_state
            left[k] = path.initial_state
        else:
            right[k] = path.state(grid)
            left[k] = path.state_before(grid)
    return right, left


def grid_increments(
    paths: Sequence[RegimePath], grid: NDArray[np.float64], d: int
) -> tuple[NDArray[np.int32], NDArray[np.float64]]:
    """Jump counts and occupation times over each grid cell (t_j, t_{j+1}].

    Returns ``counts`` of shape (P, N, d, d) and ``occupation`` of shape
    (P, N, d).
    """
    n_paths, n_steps = len(paths), grid.size - 1
    counts = np.zeros((n_paths, n_steps, d, d), dtype=np.int32)
    occ = np.zeros((n_paths, n_steps, d))
    dt = np.diff(grid)
    for k, path in enumerate(paths):
        if path.n_jumps == 0:
            occ[k, :, path.initial_state] = dt
            continue
        start_states = path.state(grid[:-1])
        occ[k, np.arange(n_steps), start_states] = dt
        cells = np.searchsorted(grid, path.jump_times, side="left") - 1
        cells = np.clip(cells, 0, n_steps - 1)
        prev_states = np.concatenate(([path.initial_state], path.new_states[:-1]))
        for time, cell, src, dst in zip(path.jump_times, cells, prev_states, path.new_states):
            counts[k, cell, src, dst] += 1
        for cell in np.unique(cells):
            occ[k, cell] = 0.0
            lo, hi = grid[cell], grid[cell + 1]
            t0 = lo
            state = int(path.state(lo))
            for time, dst in zip(path.jump_times, path.new_states):
                if time <= lo or time > hi:
                    continue
                occ[k, cell, state] += time - t0
                t0, state = time, int(dst)
            occ[k, cell, state] += hi - t0
    return counts, occ


def write_paths_csv(paths: Iterable[RegimePath], out: TextIO) -> None:
    """CSV dump with columns path_id, jump_time, new_state."""
    writer = csv.writer(out)
    writer.writerow(["path_id", "jump_time", "new_state"])
    for k, path in enumerate(paths):
        for time, state in zip(path.jump_times, path.new_states):
            writer.writerow([k, repr(float(time)), int(state)])
