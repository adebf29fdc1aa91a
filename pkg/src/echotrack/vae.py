"""Echo compression: RMS normalization, scalar energy feature, and a Gaussian
VAE whose posterior mean serves as the conditioning latent."""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DimensionError, NumericalAbort
from .nn import ParamStore, adam_step, glorot_uniform
from .numerics import RngStream

ENERGY_FLOOR_DB = -300.0
LOGVAR_CLAMP = 8.0


def echo_to_real(echo: np.ndarray) -> np.ndarray:
    """Complex echo (n_rx, n_slots) -> real two-channel tensor (2, n_rx, n_slots)."""
    return np.stack([echo.real, echo.imag]).astype(np.float64)


def rms_normalize(real_echo: np.ndarray) -> np.ndarray:
    """Scale so the Frobenius norm equals sqrt(total element count); the
    result is invariant to the input's absolute scale."""
    norm = np.linalg.norm(real_echo)
    if norm == 0.0:
        raise NumericalAbort("cannot RMS-normalize an all-zero echo")
    return real_echo * (math.sqrt(real_echo.size) / norm)


def echo_energy(echo: np.ndarray) -> float:
    """Mean per-entry echo power in dB; floored at -300 dB for a zero echo."""
    power = float(np.mean(np.abs(echo) ** 2))
    if power <= 0.0:
        return ENERGY_FLOOR_DB
    return 10.0 * math.log10(power)


class VaeModel:
    """Dense Gaussian encoder/decoder over the flattened two-channel echo.

    Encoder: flat -> hidden -> hidden -> (mu, logvar) heads; decoder mirrors.
    The decoder has unit variance, so the reconstruction term of the ELBO is
    half the squared error.
    """

    def __init__(self, echo_shape: tuple[int, int, int], hidden: int, latent_dim: int, stream: RngStream):
        self.echo_shape = tuple(echo_shape)
        self.flat_dim = int(np.prod(echo_shape))
        self.hidden = hidden
        self.latent_dim = latent_dim
        self.store = ParamStore()
        self.skipped_steps = 0
        dims = [
            ("enc1", self.flat_dim, hidden),
            ("enc2", hidden, hidden),
            ("mu", hidden, latent_dim),
            ("logvar", hidden, latent_dim),
            ("dec1", latent_dim, hidden),
            ("dec2", hidden, hidden),
            ("dec3", hidden, self.flat_dim),
        ]
        for name, fan_in, fan_out in dims:
            self.store.add(f"{name}.w", glorot_uniform(stream, fan_in, fan_out, (fan_in, fan_out)))
            self.store.add(f"{name}.b", np.zeros(fan_out))

    def _tensors(self) -> dict[str, Tensor]:
        return {name: Tensor(v) for name, v in self.store.params.items()}

    @staticmethod
    def _encode(t: dict[str, Tensor], x: Tensor) -> tuple[Tensor, Tensor]:
        h = ag.relu(ag.dense(x, t["enc1.w"], t["enc1.b"]))
        h = ag.relu(ag.dense(h, t["enc2.w"], t["enc2.b"]))
        mu = ag.dense(h, t["mu.w"], t["mu.b"])
        logvar = ag.clamp(ag.dense(h, t["logvar.w"], t["logvar.b"]), -LOGVAR_CLAMP, LOGVAR_CLAMP)
        return mu, logvar

    @staticmethod
    def _decode(t: dict[str, Tensor], z: Tensor) -> Tensor:
        h = ag.relu(ag.dense(z, t["dec1.w"], t["dec1.b"]))
        h = ag.relu(ag.dense(h, t["dec2.w"], t["dec2.b"]))
        return ag.dense(h, t["dec3.w"], t["dec3.b"])

    def _check_batch(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 3:
            batch = batch[None, ...]
        if batch.shape[1:] != self.echo_shape:
            raise DimensionError(f"echo shape {batch.shape[1:]} != {self.echo_shape}")
        return batch.reshape(batch.shape[0], self.flat_dim)


def vae_encode(model: VaeModel, normalized_echo: np.ndarray) -> np.ndarray:
    """Posterior-mean latent of a single normalized echo; deterministic."""
    flat = model._check_batch(normalized_echo)
    mu, _ = VaeModel._encode(model._tensors(), Tensor(flat))
    out = mu.data
    return out[0] if out.shape[0] == 1 and np.asarray(normalized_echo).ndim == 3 else out


def elbo_parts(model: VaeModel, batch: np.ndarray, eps: np.ndarray) -> tuple[Tensor, float, float, dict[str, Tensor]]:
    """Negative-ELBO tape for a batch, with the reparameterization noise
    supplied explicitly (so gradients are checkable)."""
    flat = model._check_batch(batch)
    tensors = model._tensors()
    x = Tensor(flat)
    mu, logvar = VaeModel._encode(tensors, x)
    std = ag.exp(ag.scale(logvar, 0.5))
    z = ag.add(mu, ag.mul(std, Tensor(eps)))
    recon_flat = VaeModel._decode(tensors, z)
    recon = ag.scale(ag.tmean(ag.tsum(ag.square(x - recon_flat), axis=1)), 0.5)
    kl_terms = ag.square(mu) + ag.exp(logvar) - Tensor(np.ones_like(mu.data)) - logvar
    kl = ag.scale(ag.tmean(ag.tsum(kl_terms, axis=1)), 0.5)
    loss = ag.add(recon, kl)
    return loss, float(recon.data), float(kl.data), tensors


def vae_train_step(
    model: VaeModel, batch: np.ndarray, stream: RngStream, lr: float = 1e-3
) -> tuple[float, float]:
    """One Adam step on the negative ELBO; returns (reconstruction, KL)."""
    flat = model._check_batch(batch)
    eps = stream.normal(flat.shape[0] * model.latent_dim).reshape(flat.shape[0], model.latent_dim)
    loss, recon, kl, tensors = elbo_parts(model, batch, eps)
    if not np.isfinite(loss.data):
        model.skipped_steps += 1
        return recon, kl
    loss.backward()
    adam_step(model.store, {name: t.grad for name, t in tensors.items()}, lr)
    return recon, kl
