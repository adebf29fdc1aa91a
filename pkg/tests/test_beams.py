import math

import numpy as np
import pytest

from echotrack.beams import (
    BeamPlan,
    assemble_transmit,
    beam_score,
    beam_sin_angles,
    codebook_scores,
    dft_codebook,
    initial_plan,
    select_beams,
)
from echotrack.errors import ConfigError
from echotrack.numerics import RngStream
from echotrack.scene import steering_vector


class TestCodebook:
    def test_dc_beam_is_broadside(self):
        cb = dft_codebook(8, 16)
        assert np.allclose(cb.beams[:, 0], steering_vector(0.0, 8))

    def test_orthogonality_square(self):
        cb = dft_codebook(16, 16)
        gram = cb.beams.conj().T @ cb.beams
        off = gram - np.diag(np.diag(gram))
        assert np.abs(off).max() < 1e-12

    def test_unit_norm(self):
        cb = dft_codebook(32, 32)
        assert np.allclose(np.linalg.norm(cb.beams, axis=0), 1.0, atol=1e-12)


class TestAssembleTransmit:
    def test_single_beam_constant_symbol(self):
        cb = dft_codebook(8, 16)
        plan = BeamPlan((3,), (1.0,))
        tx = assemble_transmit(plan, cb, 5, RngStream(0, "sym"), tx_power_w=1.0)
        # every column is the beam scaled by a unit-modulus symbol
        for n in range(5):
            ratio = tx[:, n] / cb.beams[:, 3]
            assert np.allclose(ratio, ratio[0])
            assert abs(abs(ratio[0]) - 1.0) < 1e-12

    def test_expected_per_slot_power(self):
        cb = dft_codebook(8, 16)
        plan = BeamPlan((0, 3, 7), (0.5, 1.0, 1.5))
        tx = assemble_transmit(plan, cb, 10_000, RngStream(1, "sym"), tx_power_w=4.0)
        power = np.mean(np.sum(np.abs(tx) ** 2, axis=0))
        assert abs(power / 3.0 - 1.0) < 0.02

    def test_covariance_oracle_two_orthogonal_beams(self):
        cb = dft_codebook(8, 8)
        plan = BeamPlan((1, 5), (0.5, 0.5))
        tx = assemble_transmit(plan, cb, 10_000, RngStream(2, "sym"), tx_power_w=1.0)
        cov = tx @ tx.conj().T / tx.shape[1]
        v1, v2 = cb.beams[:, 1], cb.beams[:, 5]
        expected = 0.5 * (np.outer(v1, v1.conj()) + np.outer(v2, v2.conj()))
        err = np.linalg.norm(cov - expected) / np.linalg.norm(expected)
        assert err < 0.05

    def test_power_budget_enforced(self):
        cb = dft_codebook(8, 16)
        plan = BeamPlan((0, 1), (1.0, 1.0))
        with pytest.raises(ConfigError):
            assemble_transmit(plan, cb, 4, RngStream(0, "sym"), tx_power_w=1.5)


class TestBeamScore:
    def test_matched_beam(self):
        theta, d = 0.4, 20.0
        score = beam_score(steering_vector(theta, 16), np.array([theta]), np.array([d]))
        assert score == pytest.approx(d**4, rel=1e-12)

    def test_orthogonal_on_grid_zero(self):
        cb = dft_codebook(16, 16)
        sin_dirs = beam_sin_angles(cb)
        theta = math.asin(sin_dirs[2])
        score = beam_score(cb.beams[:, 3], np.array([theta]), np.array([15.0]))
        assert score < 1e-20 * 15.0**4

    def test_quartic_weight_ratio(self):
        v = steering_vector(0.1, 16)
        s1 = beam_score(v, np.array([0.1]), np.array([10.0]))
        s2 = beam_score(v, np.array([0.1]), np.array([20.0]))
        assert s2 / s1 == pytest.approx(16.0, rel=1e-12)

    def test_permutation_invariance(self):
        v = steering_vector(-0.2, 16)
        thetas = np.array([0.1, -0.5, 0.9])
        ds = np.array([12.0, 33.0, 47.0])
        perm = [2, 0, 1]
        assert beam_score(v, thetas, ds) == pytest.approx(
            beam_score(v, thetas[perm], ds[perm]), rel=1e-12
        )

    def test_non_negative(self):
        s = RngStream(3, "score")
        v = steering_vector(0.0, 8)
        for _ in range(50):
            thetas = s.uniform(3, -1.0, 1.0)
            ds = s.uniform(3, 10.0, 50.0)
            assert beam_score(v, thetas, ds) >= 0.0


class TestSelectBeams:
    def test_strictly_decreasing_scores(self):
        plan = select_beams(np.arange(16, 0, -1, dtype=float), 4, 2.0)
        assert plan.indices == (0, 1, 2, 3)
        assert plan.powers_w == (0.5, 0.5, 0.5, 0.5)

    def test_tie_break_by_lower_index(self):
        plan = select_beams(np.ones(16), 4, 1.0)
        assert plan.indices == (0, 1, 2, 3)

    def test_power_conservation(self):
        plan = select_beams(RngStream(9, "s").uniform(32), 8, 19.95)
        assert sum(plan.powers_w) == pytest.approx(19.95, rel=1e-12)

    def test_matched_beam_selected_for_on_grid_target(self):
        cb = dft_codebook(32, 32)
        sin_dirs = beam_sin_angles(cb)
        m = 3
        theta = math.asin(sin_dirs[m])
        scores = codebook_scores(cb, np.array([theta]), np.array([25.0]))
        plan = select_beams(scores, 8, 1.0)
        assert m in plan.indices
        # exhaustive check: beam m maximizes the score uniquely
        assert np.argmax(scores) == m


class TestInitialPlan:
    def test_covers_sector_with_distinct_beams(self):
        cb = dft_codebook(8, 16)
        plan = initial_plan(cb, 4, 2.0, math.pi / 3)
        assert len(set(plan.indices)) == 4
        dirs = beam_sin_angles(cb)[list(plan.indices)]
        assert np.all(np.abs(dirs) <= math.sin(math.pi / 3) + 2.0 / 16)
        assert sum(plan.powers_w) == pytest.approx(2.0)
