"""Benchmark estimators: subspace angle estimation (MUSIC, ESPRIT) with
least-squares ranging, a per-target constant-velocity Kalman filter, and a
1-D CNN state regressor."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, SingularMatrixError
from .nn import LayerSpec, Network, adam_step
from .numerics import RngStream, hermitian_eig, least_squares
from .scene import steering_matrix

MUSIC_GRID_SIZE = 2048


def sample_covariance(echo: np.ndarray) -> np.ndarray:
    """Snapshot-averaged spatial covariance (1/N) sum_n r[n] r[n]^H."""
    echo = np.asarray(echo)
    if echo.ndim != 2 or echo.shape[1] < 1:
        raise DimensionError(f"expected (n_rx, n_snapshots), got {echo.shape}")
    return echo @ echo.conj().T / echo.shape[1]


def music_grid(theta_max: float, size: int = MUSIC_GRID_SIZE) -> np.ndarray:
    return np.linspace(-theta_max, theta_max, size)


def music_angles(
    cov: np.ndarray, n_targets: int, grid: np.ndarray
) -> tuple[np.ndarray, bool]:
    """Angles of the n largest pseudo-spectrum peaks.

    Returns (angles sorted ascending, degenerate flag). The flag is set when
    fewer than n separated peaks exist; missing angles are padded with the
    strongest one found (or the global spectrum argmax if none).
    """
    n_rx = cov.shape[0]
    if n_targets >= n_rx:
        raise ConfigError("MUSIC needs n_targets < n_rx")
    _, vecs = hermitian_eig(cov)
    noise_space = vecs[:, n_targets:]
    a = steering_matrix(grid, n_rx)
    denom = np.sum(np.abs(noise_space.conj().T @ a) ** 2, axis=0)
    spectrum = 1.0 / np.maximum(denom, 1e-300)
    if spectrum.max() - spectrum.min() <= 1e-9 * spectrum.max():
        # flat pseudo-spectrum (e.g. isotropic covariance): no usable peaks
        return np.full(n_targets, grid[int(np.argmax(spectrum))]), True

    inner = (spectrum[1:-1] > spectrum[:-2]) & (spectrum[1:-1] > spectrum[2:])
    peak_idx = list(np.nonzero(inner)[0] + 1)
    if spectrum[0] > spectrum[1]:
        peak_idx.append(0)
    if spectrum[-1] > spectrum[-2]:
        peak_idx.append(len(grid) - 1)
    peak_idx.sort(key=lambda i: -spectrum[i])

    degenerate = len(peak_idx) < n_targets
    if not peak_idx:
        peak_idx = [int(np.argmax(spectrum))]
    chosen = peak_idx[:n_targets]
    while len(chosen) < n_targets:
        chosen.append(peak_idx[0])
    return np.sort(grid[chosen]), degenerate


def esprit_angles(cov: np.ndarray, n_targets: int) -> tuple[np.ndarray, bool]:
    """Rotational-invariance angle estimates from the two shifted subarrays.

    Returns (angles sorted ascending, unreliable flag); the flag is set when
    any rotational eigenvalue magnitude falls outside [0.5, 1.5].
    """
    n_rx = cov.shape[0]
    if n_targets >= n_rx - 1:
        raise ConfigError("ESPRIT needs n_targets < n_rx - 1")
    # forward-backward averaging: exact for ULA covariances, reduces the
    # subspace estimation noise of finite snapshot counts
    exchange = np.eye(n_rx)[::-1]
    cov = 0.5 * (cov + exchange @ cov.conj() @ exchange)
    _, vecs = hermitian_eig(cov)
    signal_space = vecs[:, :n_targets]
    rotation = least_squares(signal_space[:-1, :], signal_space[1:, :])
    eigvals = np.linalg.eigvals(rotation)
    unreliable = bool(np.any((np.abs(eigvals) > 1.5) | (np.abs(eigvals) < 0.5)))
    thetas = np.arcsin(np.clip(np.angle(eigvals) / np.pi, -1.0, 1.0))
    return np.sort(thetas), unreliable


def ls_range(
    echo: np.ndarray,
    transmit: np.ndarray,
    thetas: np.ndarray,
    wavelength_m: float,
    d_min: float,
    d_max: float,
) -> tuple[np.ndarray, bool]:
    """Per-target distances from least-squares gains at the given angles.

    Fits r[n] ~ sum_q beta_q a_r(theta_q) a_t(theta_q)^H s[n], then inverts
    the two-way free-space law assuming unit scattering amplitude:
    d = (wavelength / 4 pi) / sqrt(|beta|). Ill-conditioned designs (nearly
    equal angles) fall back to a ridge solve; returns (distances, ridge flag).
    """
    thetas = np.atleast_1d(np.asarray(thetas, dtype=np.float64))
    n_rx, n_slots = echo.shape
    gains = steering_matrix(thetas, transmit.shape[0]).conj().T @ transmit  # (Q, N)
    a_r = steering_matrix(thetas, n_rx)  # (n_rx, Q)
    design = (a_r[:, None, :] * gains.T[None, :, :]).reshape(n_rx * n_slots, len(thetas))
    b = echo.reshape(n_rx * n_slots)

    col_norms = np.linalg.norm(design, axis=0)
    col_norms = np.where(col_norms > 0, col_norms, 1.0)
    unit_design = design / col_norms
    svals = np.linalg.svd(unit_design, compute_uv=False)
    ill_conditioned = svals[-1] < 1e-8 * svals[0]
    ridge_used = False
    if ill_conditioned:
        ridge_used = True
        gram = unit_design.conj().T @ unit_design + 1e-6 * np.eye(len(thetas))
        beta = np.linalg.solve(gram, unit_design.conj().T @ b) / col_norms
    else:
        try:
            beta = least_squares(design, b)
        except SingularMatrixError:
            ridge_used = True
            gram = unit_design.conj().T @ unit_design + 1e-6 * np.eye(len(thetas))
            beta = np.linalg.solve(gram, unit_design.conj().T @ b) / col_norms

    amp = np.sqrt(np.maximum(np.abs(beta), 1e-300))
    d_hat = (wavelength_m / (4.0 * math.pi)) / amp
    return np.clip(d_hat, d_min, d_max), ridge_used


# ---------------------------------------------------------------------------
# Kalman filter
# ---------------------------------------------------------------------------

_KF_MEAS_VAR = 1e-6  # ground-truth feedback during the training phase
KF_QTHETA_GRID = (1e-7, 1e-5, 1e-3)  # rad^2/s^3 white-accel spectral densities
KF_QD_GRID = (1e-3, 1e-1, 10.0)  # m^2/s^3


def _kf_matrices(dt: float, q_theta: float, q_d: float) -> tuple[np.ndarray, np.ndarray]:
    f2 = np.array([[1.0, dt], [0.0, 1.0]])
    q2 = np.array([[dt**3 / 3.0, dt**2 / 2.0], [dt**2 / 2.0, dt]])
    f = np.zeros((4, 4))
    f[:2, :2] = f2
    f[2:, 2:] = f2
    q = np.zeros((4, 4))
    q[:2, :2] = q_theta * q2
    q[2:, 2:] = q_d * q2
    return f, q


@dataclass
class KalmanTrack:
    """Constant-velocity track on (theta, theta_dot, d, d_dot)."""

    x: np.ndarray
    p: np.ndarray
    dt: float
    q_theta: float = KF_QTHETA_GRID[1]
    q_d: float = KF_QD_GRID[1]
    meas_var: float = _KF_MEAS_VAR

    @classmethod
    def from_measurement(cls, theta: float, d: float, dt: float, **kw) -> "KalmanTrack":
        x = np.array([theta, 0.0, d, 0.0])
        p = np.diag([1.0, 10.0, 100.0, 100.0])
        return cls(x=x, p=p, dt=dt, **kw)


_H = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])


def kf_predict(track: KalmanTrack) -> KalmanTrack:
    f, q = _kf_matrices(track.dt, track.q_theta, track.q_d)
    track.x = f @ track.x
    track.p = f @ track.p @ f.T + q
    track.p = 0.5 * (track.p + track.p.T)
    return track


def kf_update(track: KalmanTrack, measurement: np.ndarray) -> KalmanTrack:
    """Joseph-form measurement update with z = (theta, d)."""
    r = track.meas_var * np.eye(2)
    y = np.asarray(measurement) - _H @ track.x
    s = _H @ track.p @ _H.T + r
    gain = track.p @ _H.T @ np.linalg.inv(s)
    track.x = track.x + gain @ y
    i_kh = np.eye(4) - gain @ _H
    track.p = i_kh @ track.p @ i_kh.T + gain @ r @ gain.T
    track.p = 0.5 * (track.p + track.p.T)
    return track


def _kf_log_likelihood(measurements: np.ndarray, dt: float, q_theta: float, q_d: float) -> float:
    track = KalmanTrack.from_measurement(measurements[0, 0], measurements[0, 1], dt, q_theta=q_theta, q_d=q_d)
    kf_update(track, measurements[0])
    ll = 0.0
    for z in measurements[1:]:
        kf_predict(track)
        y = z - _H @ track.x
        s = _H @ track.p @ _H.T + track.meas_var * np.eye(2)
        ll += -0.5 * (math.log((2 * math.pi) ** 2 * np.linalg.det(s)) + float(y @ np.linalg.solve(s, y)))
        kf_update(track, z)
    return ll


def kf_tune(measurements: np.ndarray, dt: float) -> tuple[float, float, KalmanTrack]:
    """Grid-search the process-noise densities maximizing the one-step
    prediction likelihood over a measurement history, then return the track
    refiltered through that history with the winning pair."""
    best = (-math.inf, KF_QTHETA_GRID[1], KF_QD_GRID[1])
    for q_theta in KF_QTHETA_GRID:
        for q_d in KF_QD_GRID:
            ll = _kf_log_likelihood(measurements, dt, q_theta, q_d)
            if ll > best[0]:
                best = (ll, q_theta, q_d)
    _, q_theta, q_d = best
    track = KalmanTrack.from_measurement(measurements[0, 0], measurements[0, 1], dt, q_theta=q_theta, q_d=q_d)
    kf_update(track, measurements[0])
    for z in measurements[1:]:
        kf_predict(track)
        kf_update(track, z)
    return q_theta, q_d, track


# ---------------------------------------------------------------------------
# CNN regressor
# ---------------------------------------------------------------------------


class CnnRegressor:
    """1-D convolutional state regressor on a single-channel feature
    sequence: three conv layers with ReLU, global average pooling, two
    dense layers. A stride > 1 downsamples long sequences at each conv."""

    def __init__(self, feature_len: int, out_dim: int, channels: tuple[int, int, int], stream: RngStream, kernel: int = 3, stride: int = 1):
        c1, c2, c3 = channels
        specs = [
            LayerSpec("conv1d", (1, c1, kernel, stride)),
            LayerSpec("relu"),
            LayerSpec("conv1d", (c1, c2, kernel, stride)),
            LayerSpec("relu"),
            LayerSpec("conv1d", (c2, c3, kernel, stride)),
            LayerSpec("relu"),
            LayerSpec("global_avg_pool"),
            LayerSpec("dense", (c3, c3)),
            LayerSpec("relu"),
            LayerSpec("dense", (c3, out_dim)),
        ]
        self.net = Network(specs, input_shape=(1, feature_len))
        self.net.init_params(stream)
        self.feature_len = feature_len
        self.out_dim = out_dim

    @property
    def store(self):
        return self.net.store

    def n_parameters(self) -> int:
        return self.net.store.n_parameters()


def cnn_forward(model: CnnRegressor, feature: np.ndarray) -> np.ndarray:
    """Map one feature vector (length feature_len) to a packed state vector."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim == 1:
        return model.net.forward(feature[None, :])
    return model.net.forward(feature[:, None, :])


def cnn_train_step(model: CnnRegressor, features: np.ndarray, targets: np.ndarray, lr: float = 1e-3) -> float:
    """One Adam step on the mean-squared error to the packed states."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    pred = model.net.forward(features[:, None, :])
    err = pred - targets
    loss = float(np.mean(err**2))
    grads, _ = model.net.backward(2.0 * err / err.size)
    adam_step(model.net.store, grads, lr)
    return loss
