from __future__ import annotations

import io

import numpy as np
import pytest

from smp_kit.chain import (
    CHUNK_SIZE,
    GeneratorMatrix,
    RegimePath,
    counting_record,
    grid_increments,
    path_rng,
    regimes_on_grid,
    run_chunked,
    simulate_chain,
    simulate_chains,
    transition_probability,
    write_paths_csv,
)
from smp_kit.errors import ConfigurationError, DomainError


class TestGeneratorMatrix:
    def test_rejects_bad_row_sum(self):
        with pytest.raises(ConfigurationError, match="row 0"):
            GeneratorMatrix([[-1.0, 0.5], [1.0, -1.0]])

    def test_rejects_negative_rate(self):
        with pytest.raises(ConfigurationError, match="negative off-diagonal"):
            GeneratorMatrix([[1.0, -1.0], [1.0, -1.0]])

    def test_rejects_non_square(self):
        with pytest.raises(ConfigurationError):
            GeneratorMatrix([[0.0, 0.0, 0.0]])

    def test_absorbing_state_allowed(self):
        Q = GeneratorMatrix([[0.0, 0.0], [1.0, -1.0]])
        paths = simulate_chains(Q, 0, 1.0, 5, seed=1)
        assert all(p.n_jumps == 0 for p in paths)

    def test_jump_distribution(self, three_state_q):
        np.testing.assert_allclose(three_state_q.jump_distribution(0), [0, 2 / 3, 1 / 3])


class TestRegimePath:
    def test_right_and_left_limits(self):
        path = RegimePath(0, np.array([0.3, 0.7]), np.array([1, 0]), 1.0)
        assert path.state(0.3) == 1
        assert path.state_before(0.3) == 0
        assert path.state(0.29) == 0
        assert path.state(1.0) == 0

    def test_validation(self):
        with pytest.raises(ConfigurationError):
            RegimePath(0, np.array([0.5, 0.4]), np.array([1, 0]), 1.0)
        with pytest.raises(ConfigurationError):
            RegimePath(0, np.array([0.5]), np.array([0]), 1.0)

    def test_sojourns_cover_horizon(self, three_state_q):
        path = simulate_chain(three_state_q, 0, 2.0, path_rng(3, 0, 0))
        total = sum(d for _, d in path.sojourns(2.0))
        assert total == pytest.approx(2.0)


class TestSimulation:
    def test_reproducible_and_thread_independent(self, three_state_q):
        a = simulate_chains(three_state_q, 0, 1.0, CHUNK_SIZE + 17, seed=9, threads=1)
        b = simulate_chains(three_state_q, 0, 1.0, CHUNK_SIZE + 17, seed=9, threads=4)
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa.jump_times, pb.jump_times)
            np.testing.assert_array_equal(pa.new_states, pb.new_states)

    def test_offset_selects_streams(self, symmetric_q):
        full = simulate_chains(symmetric_q, 0, 1.0, 10, seed=2)
        tail = simulate_chains(symmetric_q, 0, 1.0, 5, seed=2, offset=5)
        for pa, pb in zip(full[5:], tail):
            np.testing.assert_array_equal(pa.jump_times, pb.jump_times)

    def test_bad_initial_state(self, symmetric_q):
        with pytest.raises(DomainError):
            simulate_chains(symmetric_q, 2, 1.0, 3, seed=0)

    def test_transition_matrix_matches_expm(self, three_state_q):
        P = 40_000
        paths = simulate_chains(three_state_q, 0, 0.8, P, seed=11)
        ends = np.array([p.state(0.8) for p in paths])
        freq = np.bincount(ends, minlength=3) / P
        exact = transition_probability(three_state_q, 0.8)[0]
        se = np.sqrt(exact * (1 - exact) / P)
        assert np.all(np.abs(freq - exact) <= 4 * se)

    def test_transition_probability_rows(self, three_state_q):
        M = transition_probability(three_state_q, 1.3)
        np.testing.assert_allclose(M.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(transition_probability(three_state_q, 0.0), np.eye(3), atol=1e-15)


class TestCounting:
    def test_counts_and_occupation(self, symmetric_q):
        path = RegimePath(0, np.array([0.25, 0.5]), np.array([1, 0]), 1.0)
        rec = counting_record(path, symmetric_q, 0.75)
        np.testing.assert_array_equal(rec.jump_counts, [[0, 1], [1, 0]])
        np.testing.assert_allclose(rec.occupation_times, [0.5, 0.25])
        np.testing.assert_allclose(rec.compensated(symmetric_q), [[0, 0.5], [0.75, 0]])

    def test_compensated_mean_zero(self, three_state_q):
        P = 20_000
        paths = simulate_chains(three_state_q, 1, 1.0, P, seed=5)
        vals = np.array([counting_record(p, three_state_q, 1.0).compensated(three_state_q) for p in paths])
        mean, se = vals.mean(axis=0), vals.std(axis=0, ddof=1) / np.sqrt(P)
        assert np.all(np.abs(mean) <= 4 * se + 1e-12)


class TestGrid:
    def test_regimes_on_grid(self):
        path = RegimePath(0, np.array([0.5]), np.array([1]), 1.0)
        right, left = regimes_on_grid([path], np.linspace(0, 1, 5))
        np.testing.assert_array_equal(right[0], [0, 0, 1, 1, 1])
        np.testing.assert_array_equal(left[0], [0, 0, 0, 1, 1])

    def test_increments_sum_to_record(self, three_state_q):
        grid = np.linspace(0, 1, 11)
        paths = simulate_chains(three_state_q, 0, 1.0, 50, seed=4)
        counts, occ = grid_increments(paths, grid, 3)
        np.testing.assert_allclose(occ.sum(axis=2), 0.1)
        for k, p in enumerate(paths):
            rec = counting_record(p, three_state_q, 1.0)
            np.testing.assert_array_equal(counts[k].sum(axis=0), rec.jump_counts)
            np.testing.assert_allclose(occ[k].sum(axis=0), rec.occupation_times, atol=1e-12)


def test_run_chunked_covers_range():
    seen = np.zeros(3 * CHUNK_SIZE + 5, dtype=int)

    def work(a, b):
        seen[a:b] += 1

    run_chunked(seen.size, work, threads=3)
    assert np.all(seen == 1)


def test_write_paths_csv():
    buf = io.StringIO()
    write_paths_csv([RegimePath(0, np.array([0.5]), np.array([1]), 1.0)], buf)
    assert buf.getvalue().splitlines() == ["path_id,jump_time,new_state", "0,0.5,1"]
