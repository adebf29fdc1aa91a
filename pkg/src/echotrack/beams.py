"""DFT transmit codebook, transmit-block assembly, and prediction-driven
beam scoring / top-M selection with equal power split."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import RngStream
from .scene import steering_matrix


@dataclass(frozen=True)
class Codebook:
    """Fixed set of unit-norm transmit beams, columns of `beams`."""

    beams: np.ndarray  # (n_tx, n_beams)

    @property
    def n_tx(self) -> int:
        return self.beams.shape[0]

    @property
    def n_beams(self) -> int:
        return self.beams.shape[1]


@dataclass(frozen=True)
class BeamPlan:
    indices: tuple[int, ...]
    powers_w: tuple[float, ...]

    def __post_init__(self):
        if len(self.indices) != len(self.powers_w):
            raise ConfigError("indices and powers must have equal length")
        if len(set(self.indices)) != len(self.indices):
            raise ConfigError("beam indices must be distinct")


def dft_codebook(n_tx: int, n_beams: int) -> Codebook:
    """Beam m has entries exp(j*2*pi*k*m / n_beams) / sqrt(n_tx)."""
    if n_beams < 1:
        raise ConfigError("need at least one beam")
    k = np.arange(n_tx)[:, None]
    m = np.arange(n_beams)[None, :]
    return Codebook(np.exp(2j * np.pi * k * m / n_beams) / math.sqrt(n_tx))


def beam_sin_angles(codebook: Codebook) -> np.ndarray:
    """Steering identification of DFT beams: beam m points at
    sin(theta) = 2m / n_beams, wrapped into [-1, 1)."""
    s = 2.0 * np.arange(codebook.n_beams) / codebook.n_beams
    return np.where(s >= 1.0, s - 2.0, s)


def initial_plan(codebook: Codebook, m_select: int, tx_power_w: float, theta_max: float) -> BeamPlan:
    """Uninformed starting plan: the beams whose directions most evenly cover
    [-theta_max, theta_max], equal power split."""
    if m_select > codebook.n_beams:
        raise ConfigError("cannot select more beams than the codebook holds")
    sin_dirs = beam_sin_angles(codebook)
    wanted = np.linspace(-math.sin(theta_max), math.sin(theta_max), m_select)
    chosen: list[int] = []
    for s in wanted:
        order = np.argsort(np.abs(sin_dirs - s), kind="stable")
        idx = next(int(i) for i in order if int(i) not in chosen)
        chosen.append(idx)
    return BeamPlan(tuple(sorted(chosen)), (tx_power_w / m_select,) * m_select)


def assemble_transmit(
    plan: BeamPlan,
    codebook: Codebook,
    n_slots: int,
    symbol_stream: RngStream,
    tx_power_w: float,
) -> np.ndarray:
    """Per-slot superposition of the planned beams carrying independent
    unit-modulus QPSK probing symbols; shape (n_tx, n_slots)."""
    if sum(plan.powers_w) > tx_power_w * (1.0 + 1e-9):
        raise ConfigError("beam plan exceeds the transmit power budget")
    transmit = np.zeros((codebook.n_tx, n_slots), dtype=np.complex128)
    for idx, power in zip(plan.indices, plan.powers_w):
        quad = symbol_stream.integers(0, 4, n_slots)
        symbols = np.exp(1j * (np.pi / 4.0 + np.pi / 2.0 * quad))
        transmit += math.sqrt(power) * codebook.beams[:, idx][:, None] * symbols[None, :]
    return transmit


def beam_score(beam: np.ndarray, theta_hat: np.ndarray, d_hat: np.ndarray) -> float:
    """Distance-compensated alignment score: sum_q d_q^4 |a_t(theta_q)^H v|^2."""
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=np.float64))
    d_hat = np.atleast_1d(np.asarray(d_hat, dtype=np.float64))
    if theta_hat.shape != d_hat.shape:
        raise DimensionError("angle and distance predictions must align")
    gains = np.abs(steering_matrix(theta_hat, len(beam)).conj().T @ beam) ** 2
    return float(np.sum(d_hat**4 * gains))


def codebook_scores(codebook: Codebook, theta_hat: np.ndarray, d_hat: np.ndarray) -> np.ndarray:
    """beam_score evaluated for every beam in the codebook."""
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=np.float64))
    d_hat = np.atleast_1d(np.asarray(d_hat, dtype=np.float64))
    gains = np.abs(steering_matrix(theta_hat, codebook.n_tx).conj().T @ codebook.beams) ** 2
    return (d_hat**4) @ gains


def select_beams(scores: np.ndarray, m_select: int, tx_power_w: float) -> BeamPlan:
    """Top-m beams by score (ties broken by lower index), equal power split."""
    scores = np.asarray(scores, dtype=np.float64)
    if m_select > len(scores):
        raise ConfigError("cannot select more beams than scored")
    order = np.argsort(-scores, kind="stable")[:m_select]
    return BeamPlan(tuple(int(i) for i in order), (tx_power_w / m_select,) * m_select)
