import itertools
import json
import math

import numpy as np
import pytest

from echotrack.buffer import ReplayBuffer
from echotrack.diffusion import EmaNormalizer, pack_state
from echotrack.errors import CheckpointError, ConfigError
from echotrack.metrics import hungarian_association, per_target_loss, rsse
from echotrack.numerics import RngStream
from echotrack.tracker import (
    EpisodeConfig,
    EpisodeRunner,
    aggregate_predictions,
    profile_config,
    run_episode,
)

TINY = dict(
    n_blocks=12,
    n_train_blocks=6,
    n_clutter=10,
    k_samples=4,
    t_diffusion=10,
    vae_latent_dim=8,
    vae_hidden=16,
    ddpm_hidden=32,
    cnn_channels=(4, 8, 8),
    batch_size=16,
)


class TestReplayBuffer:
    def test_fifo_eviction(self):
        buf = ReplayBuffer(capacity=4096)
        for i in range(4097):
            buf.push(np.array([float(i)]))
        assert len(buf) == 4096
        (items,) = buf.sample(1, RngStream(0, "s"))
        stored = {float(slot[0][0]) for slot in buf._slots}
        assert 0.0 not in stored
        assert 4096.0 in stored

    def test_sample_with_replacement_small_buffer(self):
        buf = ReplayBuffer(capacity=100)
        for i in range(10):
            buf.push(np.array([float(i)]), np.array([2.0 * i]))
        a, b = buf.sample(64, RngStream(1, "s"))
        assert a.shape == (64, 1)
        assert np.array_equal(b[:, 0], 2.0 * a[:, 0])

    def test_uniform_sampling(self):
        buf = ReplayBuffer(capacity=100)
        for i in range(100):
            buf.push(np.array([float(i)]))
        (draws,) = buf.sample(100_000, RngStream(2, "s"))
        counts = np.bincount(draws[:, 0].astype(int), minlength=100)
        sigma = math.sqrt(100_000 * 0.01 * 0.99)
        # multinomial bound: a 100-bin maximum exceeds 3 sigma occasionally,
        # so allow a few such bins but no gross outliers, and gate chi-square
        outliers = np.sum(np.abs(counts - 1000) > 3 * sigma)
        assert outliers <= 3
        assert np.all(np.abs(counts - 1000) < 5 * sigma)
        chi2 = np.sum((counts - 1000.0) ** 2 / 1000.0)
        assert chi2 < 99 + 5 * math.sqrt(198)

    def test_empty_sample_rejected(self):
        with pytest.raises(ConfigError):
            ReplayBuffer(4).sample(1, RngStream(0, "s"))

    def test_state_roundtrip(self):
        buf = ReplayBuffer(capacity=5)
        for i in range(8):
            buf.push(np.array([float(i), 1.0]), np.array([-i, 0.5]))
        arrays = buf.state_arrays("b/")
        clone = ReplayBuffer(capacity=5)
        clone.load_state_arrays(arrays, "b/")
        assert len(clone) == len(buf)
        assert clone._next == buf._next
        for s1, s2 in zip(buf._slots, clone._slots):
            assert all(np.array_equal(a, b) for a, b in zip(s1, s2))


class TestMetrics:
    def test_perfect_estimates(self):
        t = np.array([0.1, -0.2])
        d = np.array([20.0, 30.0])
        assert rsse(t, d, t, d) == (0.0, 0.0)

    def test_known_arithmetic(self):
        angle, _ = rsse(
            np.array([0.0, 0.0]), np.array([10.0, 10.0]),
            np.array([0.1, 0.2]), np.array([10.0, 10.0]),
        )
        assert angle == pytest.approx(math.sqrt(0.05))

    def test_per_target_loss(self):
        losses = per_target_loss(
            np.array([0.1]), np.array([20.0]), np.array([0.0]), np.array([24.0]), eta=6.25e-4
        )
        assert losses[0] == pytest.approx(0.1**2 + 6.25e-4 * 16.0)

    def test_hungarian_beats_identity_exhaustive(self):
        s = RngStream(3, "h")
        for q in (2, 3, 4):
            for _ in range(25):
                truth = s.uniform(q, -1.0, 1.0)
                est = s.uniform(q, -1.0, 1.0)
                idx = hungarian_association(truth, est)
                hung = np.sum((truth - est[idx]) ** 2)
                best = min(
                    np.sum((truth - est[list(perm)]) ** 2)
                    for perm in itertools.permutations(range(q))
                )
                assert hung == pytest.approx(best)
                identity = np.sum((truth - est) ** 2)
                assert hung <= identity + 1e-12

    def test_count_mismatch(self):
        from echotrack.errors import DimensionError

        with pytest.raises(DimensionError):
            rsse(np.zeros(2), np.zeros(2), np.zeros(3), np.zeros(3))


class TestAggregatePredictions:
    def _norm(self, dim):
        return EmaNormalizer(dim)  # identity statistics

    def test_single_sample_is_its_unpack(self):
        x = pack_state(np.array([0.2, -0.4]), np.array([15.0, 35.0]), 10.0, 50.0)
        (theta, d), (theta_k, d_k) = aggregate_predictions(x[None], self._norm(6), 10.0, 50.0)
        assert np.allclose(theta, [0.2, -0.4], atol=1e-12)
        assert np.allclose(d, [15.0, 35.0], atol=1e-9)
        assert theta_k.shape == (1, 2)

    def test_circular_mean_symmetric_angles(self):
        a = 0.7
        x1 = pack_state(np.array([a]), np.array([20.0]), 10.0, 50.0)
        x2 = pack_state(np.array([-a]), np.array([20.0]), 10.0, 50.0)
        (theta, d), _ = aggregate_predictions(np.stack([x1, x2]), self._norm(3), 10.0, 50.0)
        assert theta[0] == pytest.approx(0.0, abs=1e-12)

    def test_averaging_beats_median_single_sample(self):
        s = RngStream(4, "agg")
        wins = 0
        trials = 100
        for _ in range(trials):
            theta_true = np.array([0.3])
            d_true = np.array([25.0])
            x_true = pack_state(theta_true, d_true, 10.0, 50.0)
            samples = x_true[None, :] + 0.08 * s.normal(128 * 3).reshape(128, 3)
            (theta, d), (tk, dk) = aggregate_predictions(samples, self._norm(3), 10.0, 50.0)
            agg_err = rsse(theta_true, d_true, theta, d)
            single = sorted(
                math.hypot(tk[k, 0] - 0.3, 0.0) + 0 for k in range(128)
            )
            median_single = single[64]
            if agg_err[0] < median_single:
                wins += 1
        assert wins > 80


def _tiny_config(**overrides):
    merged = dict(TINY)
    merged.update(overrides)
    return profile_config("desk", **merged)


class TestEpisode:
    def test_smoke_two_blocks(self, tmp_path):
        config = _tiny_config(n_blocks=2, n_train_blocks=1, n_targets=3)
        manifest = run_episode(config, tmp_path)
        assert manifest["status"] == "complete"
        assert manifest["blocks_completed"] == 2
        lines = (tmp_path / "blocks.jsonl").read_text().strip().split("\n")
        assert len(lines) == 2
        assert (tmp_path / "metrics.csv").exists()
        assert (tmp_path / "estimates.csv").exists()
        assert (tmp_path / "manifest.json").exists()

    def test_determinism_byte_identical(self, tmp_path):
        config = _tiny_config(seed=7)
        run_episode(config, tmp_path / "a")
        run_episode(config, tmp_path / "b")
        assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
        assert (tmp_path / "a/blocks.jsonl").read_bytes() == (tmp_path / "b/blocks.jsonl").read_bytes()

    def test_phase_discipline_audit(self, tmp_path):
        manifest = run_episode(_tiny_config(), tmp_path)
        assert manifest["audit_violations"] == 0

    def test_beam_plan_legality(self, tmp_path):
        config = _tiny_config()
        run_episode(config, tmp_path)
        tx_power = 10 ** ((43.0 - 30.0) / 10.0)
        for line in (tmp_path / "blocks.jsonl").read_text().strip().split("\n"):
            rec = json.loads(line)
            beams = rec["beams"]
            assert len(set(beams)) == len(beams) == config.m_beams
            assert all(0 <= b < config.n_codebook for b in beams)

    def test_ddpm_rows_start_at_block_two(self, tmp_path):
        run_episode(_tiny_config(), tmp_path)
        rows = (tmp_path / "metrics.csv").read_text().strip().split("\n")[1:]
        ddpm_blocks = [int(r.split(",")[0]) for r in rows if r.split(",")[1 + 1] == "ddpm"]
        assert min(ddpm_blocks) == 2

    def test_methods_subset(self, tmp_path):
        config = _tiny_config(methods=("ddpm", "kf"))
        run_episode(config, tmp_path)
        rows = (tmp_path / "metrics.csv").read_text().strip().split("\n")[1:]
        methods = {r.split(",")[2] for r in rows}
        assert methods == {"ddpm", "kf"}

    def test_resume_matches_straight_run(self, tmp_path):
        config = _tiny_config(seed=3)
        straight = tmp_path / "straight"
        run_episode(config, straight)

        resumed = tmp_path / "resumed"
        run_episode(config, resumed, stop_after=6)
        ckpt = resumed / "checkpoints" / "state.ckpt"
        run_episode(config, resumed, resume_from=ckpt)
        assert (straight / "metrics.csv").read_bytes() == (resumed / "metrics.csv").read_bytes()
        assert (straight / "blocks.jsonl").read_bytes() == (resumed / "blocks.jsonl").read_bytes()

    def test_checkpoint_roundtrip_fresh_state(self, tmp_path):
        runner = EpisodeRunner(_tiny_config())
        path = tmp_path / "fresh.ckpt"
        runner.save_checkpoint(path)
        clone = EpisodeRunner.load_checkpoint(path)
        assert clone.block == runner.block
        for name in runner.vae.store.names():
            assert np.array_equal(clone.vae.store[name], runner.vae.store[name])
        for name in runner.streams:
            assert np.array_equal(
                clone.streams[name].normal(4), runner.streams[name].normal(4)
            )

    def test_corrupted_checkpoint_rejected(self, tmp_path):
        runner = EpisodeRunner(_tiny_config())
        path = tmp_path / "x.ckpt"
        runner.save_checkpoint(path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            EpisodeRunner.load_checkpoint(path)

    def test_resume_config_mismatch_rejected(self, tmp_path):
        config = _tiny_config(seed=1)
        run_episode(config, tmp_path, stop_after=3)
        other = _tiny_config(seed=2)
        with pytest.raises(ConfigError):
            run_episode(other, tmp_path, resume_from=tmp_path / "checkpoints" / "state.ckpt")


class TestEpisodeConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            EpisodeConfig.from_dict({"bogus_key": 1})

    def test_roundtrip(self):
        config = profile_config("desk", seed=5)
        assert EpisodeConfig.from_dict(config.to_dict()) == config

    def test_train_blocks_bound(self):
        with pytest.raises(ConfigError):
            EpisodeConfig(n_blocks=10, n_train_blocks=10)

    def test_profiles(self):
        desk = profile_config("desk")
        paper = profile_config("paper")
        assert desk.n_tx == 8 and desk.t_diffusion == 50
        assert paper.n_tx == 32 and paper.t_diffusion == 200 and paper.k_samples == 128
        with pytest.raises(ConfigError):
            profile_config("galaxy")

    def test_method_validation(self):
        with pytest.raises(ConfigError):
            EpisodeConfig(methods=("ddpm", "oracle"))


class TestAblationFlags:
    def test_static_baseline_beams(self, tmp_path):
        config = _tiny_config(baseline_beams="static")
        manifest = run_episode(config, tmp_path)
        assert manifest["status"] == "complete"

    def test_latent_logging(self, tmp_path):
        config = _tiny_config(log_latents=True)
        run_episode(config, tmp_path)
        lines = (tmp_path / "latents.csv").read_text().strip().split("\n")
        assert len(lines) == config.n_blocks + 1
        assert lines[0].startswith("block,z0,")
