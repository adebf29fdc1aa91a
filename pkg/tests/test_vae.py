import math

import numpy as np
import pytest

from conftest import fd_max_rel_error, pick_params
from echotrack.errors import NumericalAbort
from echotrack.numerics import RngStream
from echotrack.scene import RadioConfig, SceneParams, SceneState, TargetState, path_gain, synthesize_echo
from echotrack.vae import (
    ENERGY_FLOOR_DB,
    VaeModel,
    echo_energy,
    echo_to_real,
    elbo_parts,
    rms_normalize,
    vae_encode,
    vae_train_step,
)

SHAPE = (2, 4, 8)


def _random_echo(seed):
    return RngStream(seed, "echo").normal(int(np.prod(SHAPE))).reshape(SHAPE)


class TestRmsNormalize:
    def test_norm_by_construction(self):
        out = rms_normalize(_random_echo(0))
        assert abs(np.linalg.norm(out) - math.sqrt(out.size)) < 1e-12

    def test_idempotent(self):
        once = rms_normalize(_random_echo(1))
        twice = rms_normalize(once)
        assert np.allclose(once, twice, atol=1e-14)

    def test_scale_invariant(self):
        x = _random_echo(2)
        assert np.allclose(rms_normalize(x), rms_normalize(10.0 * x), rtol=1e-12, atol=0)

    def test_zero_input_rejected(self):
        with pytest.raises(NumericalAbort):
            rms_normalize(np.zeros(SHAPE))


class TestEchoEnergy:
    def test_unit_modulus_zero_db(self):
        echo = np.exp(1j * RngStream(0, "ph").uniform(32, 0, 2 * np.pi)).reshape(4, 8)
        assert echo_energy(echo) == pytest.approx(0.0, abs=1e-12)

    def test_log_law(self):
        echo = _random_echo(3)[0] + 1j * _random_echo(3)[1]
        assert echo_energy(math.sqrt(10) * echo) == pytest.approx(echo_energy(echo) + 10.0)

    def test_noise_power(self):
        z = RngStream(4, "n").cnormal(200_000, var=3e-5).reshape(100, 2000)
        assert echo_energy(z) == pytest.approx(10 * math.log10(3e-5), abs=0.1)

    def test_zero_floor(self):
        assert echo_energy(np.zeros((4, 8), dtype=complex)) == ENERGY_FLOOR_DB


class TestVae:
    def _model(self, seed=0):
        return VaeModel(SHAPE, hidden=16, latent_dim=6, stream=RngStream(seed, "init"))

    def test_encode_deterministic_and_finite(self):
        model = self._model()
        x = rms_normalize(_random_echo(5))
        z1 = vae_encode(model, x)
        z2 = vae_encode(model, x)
        assert np.array_equal(z1, z2)
        assert np.all(np.isfinite(z1))
        assert z1.shape == (6,)

    def test_kl_zero_for_prior_posterior(self):
        model = self._model()
        for name in ("enc1.w", "enc2.w", "mu.w", "logvar.w"):
            model.store[name] = np.zeros_like(model.store[name])
        x = rms_normalize(_random_echo(6))
        _, _, kl, _ = elbo_parts(model, x[None], np.zeros((1, 6)))
        assert kl == pytest.approx(0.0, abs=1e-12)

    def test_kl_closed_form_unit_mean(self):
        model = self._model()
        for name in ("enc1.w", "enc2.w", "mu.w", "logvar.w"):
            model.store[name] = np.zeros_like(model.store[name])
        model.store["mu.b"] = np.array([1.0, 0, 0, 0, 0, 0.0])
        x = rms_normalize(_random_echo(7))
        _, _, kl, _ = elbo_parts(model, x[None], np.zeros((1, 6)))
        assert kl == pytest.approx(0.5, abs=1e-12)

    def test_kl_non_negative_property(self):
        for seed in range(5):
            model = self._model(seed)
            x = rms_normalize(_random_echo(seed + 10))
            eps = RngStream(seed, "eps").normal(6).reshape(1, 6)
            _, _, kl, _ = elbo_parts(model, x[None], eps)
            assert kl >= 0.0

    def test_training_reduces_reconstruction(self):
        model = self._model(1)
        batch = np.stack([rms_normalize(_random_echo(20 + i)) for i in range(8)])
        stream = RngStream(2, "eps")
        first, _ = vae_train_step(model, batch, stream)
        last = None
        for _ in range(199):
            last, _ = vae_train_step(model, batch, stream)
        assert last < first

    def test_reparameterization_gradients(self):
        model = self._model(3)
        batch = np.stack([rms_normalize(_random_echo(40 + i)) for i in range(2)])
        eps = RngStream(5, "eps").normal(2 * 6).reshape(2, 6)

        loss, _, _, tensors = elbo_parts(model, batch, eps)
        loss.backward()
        grads = {name: t.grad for name, t in tensors.items()}

        def loss_fn(params):
            model.store.params.update(params)
            value, _, _, _ = elbo_parts(model, batch, eps)
            return float(value.data)

        head_params = {k: model.store.params[k] for k in ("mu.w", "mu.b", "logvar.w", "logvar.b")}
        picks = pick_params(head_params, 20, RngStream(6, "pick"))
        err = fd_max_rel_error(loss_fn, model.store.params, grads, picks)
        assert err < 1e-4

    def test_latent_separates_scenes(self):
        # fixture: single strong target at +/-30 deg, no clutter
        radio = RadioConfig(n_tx=4, n_rx=4, n_slots=8, noise_power_w=1e-4)
        params = SceneParams()

        def echo_for(theta, noise_seed):
            amp = 1.0 / path_gain(20.0, radio.wavelength_m)  # unit beta
            target = TargetState(0, "car", theta, 20.0, np.zeros(2), 0.0, amp, amp, 0.3, 0.0)
            scene = SceneState(1, [target], [], params, radio)
            tx = np.ones((4, 8), dtype=complex)
            echo = synthesize_echo(scene, tx, RngStream(noise_seed, "noise"))
            return rms_normalize(echo_to_real(echo))

        model = VaeModel((2, 4, 8), hidden=16, latent_dim=6, stream=RngStream(0, "init"))
        batch = np.stack(
            [echo_for(0.52, i) for i in range(4)] + [echo_for(-0.52, 10 + i) for i in range(4)]
        )
        stream = RngStream(1, "eps")
        for _ in range(200):
            vae_train_step(model, batch, stream)
        z_pos = vae_encode(model, echo_for(0.52, 100))
        z_pos2 = vae_encode(model, echo_for(0.52, 101))
        z_neg = vae_encode(model, echo_for(-0.52, 102))
        across = np.linalg.norm(z_pos - z_neg)
        within = np.linalg.norm(z_pos - z_pos2)
        assert across > within

    def test_nonfinite_loss_skips_step(self):
        model = self._model(4)
        model.store["dec3.b"] = np.full_like(model.store["dec3.b"], np.inf)
        before = model.store["enc1.w"].copy()
        vae_train_step(model, rms_normalize(_random_echo(50))[None], RngStream(0, "eps"))
        assert model.skipped_steps == 1
        assert np.array_equal(model.store["enc1.w"], before)
