"""Conditional diffusion core: variance schedule, closed-form forward
corruption, classifier-free training and guided ancestral sampling, state
packing, and EMA feature normalizers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, sinusoidal_embedding
from .errors import ConfigError, DimensionError
from .nn import ParamStore, adam_step, glorot_uniform
from .numerics import RngStream

TIME_EMBED_DIM = 64


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step variances and their cumulative products, indexed by t in
    1..n_steps (index 0 is the alpha_bar_0 = 1 sentinel)."""

    n_steps: int
    tau: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray


def build_schedule(
    n_steps: int,
    tau_start: float = 1e-4,
    tau_end: float = 1e-2,
    sigma_mode: str = "posterior",
) -> DiffusionSchedule:
    """Linear variance schedule. sigma_mode "posterior" uses the posterior
    variance (1-abar_{t-1})/(1-abar_t) * tau_t (zero at the final step);
    "tau" uses tau_t directly."""
    if not (0.0 < tau_start <= tau_end < 1.0):
        raise ConfigError("need 0 < tau_start <= tau_end < 1")
    if n_steps < 1:
        raise ConfigError("need at least one diffusion step")
    if sigma_mode not in ("posterior", "tau"):
        raise ConfigError(f"unknown sigma_mode {sigma_mode!r}")
    tau = np.zeros(n_steps + 1)
    tau[1:] = np.linspace(tau_start, tau_end, n_steps)
    alpha = 1.0 - tau
    alpha[0] = 1.0
    alpha_bar = np.cumprod(alpha)
    sigma_sq = np.zeros(n_steps + 1)
    if sigma_mode == "posterior":
        for t in range(1, n_steps + 1):
            sigma_sq[t] = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * tau[t]
    else:
        sigma_sq[1:] = tau[1:]
    return DiffusionSchedule(n_steps, tau, alpha, alpha_bar, np.sqrt(sigma_sq))


def forward_noise(schedule: DiffusionSchedule, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """Closed-form marginal corruption x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    if not 1 <= t <= schedule.n_steps:
        raise ConfigError(f"t={t} outside [1, {schedule.n_steps}]")
    ab = schedule.alpha_bar[t]
    return math.sqrt(ab) * np.asarray(x0) + math.sqrt(1.0 - ab) * np.asarray(eps)


class DenoiserNet:
    """Noise-prediction network on packed state vectors.

    A skip-connected dense bottleneck: the conditioner is concatenated at the
    input and re-injected (via a learned projection) at the bottleneck along
    with the sinusoidal time embedding; the decoder half adds the encoder
    activation back before the output head. A learned null token replaces the
    conditioner for the unconditional branch of classifier-free guidance.
    """

    def __init__(self, state_dim: int, cond_dim: int, hidden: int, stream: RngStream):
        if hidden % 2 != 0:
            raise ConfigError("denoiser hidden size must be even")
        self.state_dim = state_dim
        self.cond_dim = cond_dim
        self.hidden = hidden
        self.store = ParamStore()
        half = hidden // 2
        dense_dims = [
            ("inp", state_dim + cond_dim, hidden),
            ("t1", TIME_EMBED_DIM, hidden),
            ("mid", hidden, half),
            ("t2", TIME_EMBED_DIM, half),
            ("cproj", cond_dim, half),
            ("up", half, hidden),
            ("out", hidden, state_dim),
        ]
        for name, fan_in, fan_out in dense_dims:
            self.store.add(f"{name}.w", glorot_uniform(stream, fan_in, fan_out, (fan_in, fan_out)))
            self.store.add(f"{name}.b", np.zeros(fan_out))
        for name, dim in (("ln1", hidden), ("ln2", half)):
            self.store.add(f"{name}.gamma", np.ones(dim))
            self.store.add(f"{name}.beta", np.zeros(dim))
        self.store.add("null_token", np.zeros(cond_dim))

    def _tensors(self) -> dict[str, Tensor]:
        return {name: Tensor(v) for name, v in self.store.params.items()}

    @staticmethod
    def apply(t: dict[str, Tensor], x: Tensor, emb: np.ndarray, c: Tensor) -> Tensor:
        h = ag.dense(ag.concat([x, c]), t["inp.w"], t["inp.b"])
        h = ag.layer_norm(h, t["ln1.gamma"], t["ln1.beta"])
        h = ag.silu(ag.add(h, ag.dense(Tensor(emb), t["t1.w"], t["t1.b"])))
        skip = h
        h = ag.dense(h, t["mid.w"], t["mid.b"])
        h = ag.layer_norm(h, t["ln2.gamma"], t["ln2.beta"])
        h = ag.add(h, ag.dense(Tensor(emb), t["t2.w"], t["t2.b"]))
        h = ag.silu(ag.add(h, ag.dense(c, t["cproj.w"], t["cproj.b"])))
        h = ag.silu(ag.add(ag.dense(h, t["up.w"], t["up.b"]), skip))
        return ag.dense(h, t["out.w"], t["out.b"])

    def predict(self, x: np.ndarray, t_step: int | np.ndarray, cond: np.ndarray | None) -> np.ndarray:
        """Tape-free forward pass mirroring apply() op for op (the unit tests
        pin the two paths to identical output); cond=None uses the null token."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.state_dim:
            raise DimensionError(f"state dim {x.shape[1]} != {self.state_dim}")
        batch = x.shape[0]
        t_vec = np.full(batch, t_step) if np.ndim(t_step) == 0 else np.asarray(t_step)
        emb = sinusoidal_embedding(t_vec, TIME_EMBED_DIM)
        if cond is None:
            c = self.store["null_token"] * np.ones((batch, 1))
        else:
            c = np.atleast_2d(np.asarray(cond, dtype=np.float64))
            if c.shape != (batch, self.cond_dim):
                raise DimensionError(f"conditioner shape {c.shape} != {(batch, self.cond_dim)}")
        p = self.store.params

        def ln(h, gamma, beta, eps=1e-5):
            n = h.shape[-1]
            mu = h.sum(axis=-1, keepdims=True) * (1.0 / n)
            centered = h - mu
            var = (centered**2).sum(axis=-1, keepdims=True) * (1.0 / n)
            return centered * (var + eps) ** -0.5 * gamma + beta

        def _silu(h):
            return h * (1.0 / (1.0 + np.exp(-h)))

        h = np.concatenate([x, c], axis=1) @ p["inp.w"] + p["inp.b"]
        h = ln(h, p["ln1.gamma"], p["ln1.beta"])
        h = _silu(h + (emb @ p["t1.w"] + p["t1.b"]))
        skip = h
        h = h @ p["mid.w"] + p["mid.b"]
        h = ln(h, p["ln2.gamma"], p["ln2.beta"])
        h = h + (emb @ p["t2.w"] + p["t2.b"])
        h = _silu(h + (c @ p["cproj.w"] + p["cproj.b"]))
        h = _silu((h @ p["up.w"] + p["up.b"]) + skip)
        return h @ p["out.w"] + p["out.b"]


def training_step(
    denoiser: DenoiserNet,
    schedule: DiffusionSchedule,
    x_batch: np.ndarray,
    c_batch: np.ndarray,
    p_drop: float,
    stream: RngStream,
    lr: float = 2e-4,
) -> float:
    """One Adam step of the noise-prediction objective with classifier-free
    conditioning dropout. Inputs are expected already normalized."""
    x_batch = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    c_batch = np.atleast_2d(np.asarray(c_batch, dtype=np.float64))
    batch = x_batch.shape[0]
    if batch == 0:
        raise ConfigError("empty training batch")
    t_vec = stream.integers(1, schedule.n_steps + 1, batch)
    eps = stream.normal(batch * denoiser.state_dim).reshape(batch, denoiser.state_dim)
    drop = stream.bernoulli(p_drop, batch).astype(np.float64)[:, None]

    ab = schedule.alpha_bar[t_vec][:, None]
    x_t = np.sqrt(ab) * x_batch + np.sqrt(1.0 - ab) * eps
    emb = sinusoidal_embedding(t_vec, TIME_EMBED_DIM)

    tensors = denoiser._tensors()
    keep = Tensor(1.0 - drop)
    mask = Tensor(drop)
    c_eff = ag.add(ag.mul(Tensor(c_batch), keep), ag.mul(tensors["null_token"], mask))
    pred = DenoiserNet.apply(tensors, Tensor(x_t), emb, c_eff)
    loss = ag.tmean(ag.tsum(ag.square(Tensor(eps) - pred), axis=1))
    value = float(loss.data)
    if not np.isfinite(value):
        denoiser.store.skipped += 1
        return value
    loss.backward()
    grads = {name: t.grad for name, t in tensors.items() if t.grad is not None}
    adam_step(denoiser.store, grads, lr)
    return value


def _reverse_step(
    schedule: DiffusionSchedule, x: np.ndarray, t: int, eps_hat: np.ndarray, z: np.ndarray | None
) -> np.ndarray:
    coeff = schedule.tau[t] / math.sqrt(1.0 - schedule.alpha_bar[t])
    mean = (x - coeff * eps_hat) / math.sqrt(schedule.alpha[t])
    if z is None:
        return mean
    return mean + schedule.sigma[t] * z


def guided_sample(
    denoiser: DenoiserNet,
    schedule: DiffusionSchedule,
    cond: np.ndarray,
    w: float,
    k_samples: int,
    stream: RngStream,
) -> np.ndarray:
    """K ancestral trajectories with classifier-free guidance weight w.

    Per-trajectory randomness comes from labeled substreams (k0, k1, ...) of
    the given stream, so the batch evaluation is deterministic and any K' <= K
    prefix is reproducible. No noise is injected at the final step. Returns
    (K, state_dim) samples in the normalized state domain.
    """
    if w < 0:
        raise ConfigError("guidance weight must be non-negative")
    subs = [stream.substream(f"k{k}") for k in range(k_samples)]
    dim = denoiser.state_dim
    x = np.stack([s.normal(dim) for s in subs])
    c_batch = np.broadcast_to(np.asarray(cond, dtype=np.float64), (k_samples, denoiser.cond_dim)).copy()
    for t in range(schedule.n_steps, 0, -1):
        eps_c = denoiser.predict(x, t, c_batch)
        eps_u = denoiser.predict(x, t, None)
        eps_tilde = (1.0 + w) * eps_c - w * eps_u
        z = np.stack([s.normal(dim) for s in subs]) if t > 1 else None
        x = _reverse_step(schedule, x, t, eps_tilde, z)
    return x


def conditional_sample(
    denoiser: DenoiserNet,
    schedule: DiffusionSchedule,
    cond: np.ndarray,
    k_samples: int,
    stream: RngStream,
) -> np.ndarray:
    """Unguided conditional sampling (the w=0 reference path)."""
    subs = [stream.substream(f"k{k}") for k in range(k_samples)]
    dim = denoiser.state_dim
    x = np.stack([s.normal(dim) for s in subs])
    c_batch = np.broadcast_to(np.asarray(cond, dtype=np.float64), (k_samples, denoiser.cond_dim)).copy()
    for t in range(schedule.n_steps, 0, -1):
        eps_c = denoiser.predict(x, t, c_batch)
        z = np.stack([s.normal(dim) for s in subs]) if t > 1 else None
        x = _reverse_step(schedule, x, t, eps_c, z)
    return x


def pack_state(theta: np.ndarray, d: np.ndarray, d_min: float, d_max: float) -> np.ndarray:
    """[sin(theta); cos(theta); rho(d)] with rho the log-scaled distance in
    [0, 1]. Out-of-range distances are clamped."""
    theta = np.asarray(theta, dtype=np.float64)
    d = np.clip(np.asarray(d, dtype=np.float64), d_min, d_max)
    rho = np.log10(d / d_min) / math.log10(d_max / d_min)
    return np.concatenate([np.sin(theta), np.cos(theta), rho])


def unpack_state(x: np.ndarray, d_min: float, d_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of pack_state, total on arbitrary real input: angles via
    atan2 of the (possibly unnormalized) sin/cos pair, distances via the
    clamped log coordinate."""
    x = np.asarray(x, dtype=np.float64)
    if x.size % 3 != 0:
        raise DimensionError(f"state vector length {x.size} not divisible by 3")
    q = x.size // 3
    theta = np.arctan2(x[:q], x[q : 2 * q])
    rho = np.clip(x[2 * q :], 0.0, 1.0)
    d = d_min * (d_max / d_min) ** rho
    return theta, d


class EmaNormalizer:
    """Elementwise running standardization with exponential moving averages.

    The spread statistic is an EMA of absolute deviations by default
    ("abs" mode) or of squared deviations ("square" mode); both are floored
    at eps so apply/invert stay exact inverses.
    """

    def __init__(self, dim: int, decay: float = 0.99, eps: float = 1e-6, mode: str = "abs"):
        if not 0.0 < decay < 1.0:
            raise ConfigError("decay must lie in (0, 1)")
        if mode not in ("abs", "square"):
            raise ConfigError(f"unknown EMA mode {mode!r}")
        self.dim = dim
        self.decay = decay
        self.eps = eps
        self.mode = mode
        self.mu = np.zeros(dim)
        self.sigma = np.ones(dim)
        self.n_updates = 0
        self.frozen = False

    def update(self, v: np.ndarray) -> None:
        if self.frozen:
            return
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise DimensionError(f"normalizer expects shape ({self.dim},), got {v.shape}")
        d = self.decay
        self.mu = d * self.mu + (1.0 - d) * v
        dev = np.abs(v - self.mu)
        if self.mode == "abs":
            self.sigma = d * self.sigma + (1.0 - d) * dev
        else:
            self.sigma = np.sqrt(d * self.sigma**2 + (1.0 - d) * dev**2)
        self.sigma = np.maximum(self.sigma, self.eps)
        self.n_updates += 1

    def apply(self, v: np.ndarray) -> np.ndarray:
        return (np.asarray(v, dtype=np.float64) - self.mu) / (self.sigma + self.eps)

    def invert(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=np.float64) * (self.sigma + self.eps) + self.mu

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}mu": self.mu,
            f"{prefix}sigma": self.sigma,
            f"{prefix}meta": np.array([self.n_updates, int(self.frozen)], dtype=np.int64),
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        self.mu = np.array(arrays[f"{prefix}mu"], dtype=np.float64)
        self.sigma = np.array(arrays[f"{prefix}sigma"], dtype=np.float64)
        meta = arrays[f"{prefix}meta"]
        self.n_updates, self.frozen = int(meta[0]), bool(meta[1])
