"""Ground-truth scene simulation and echo synthesis.

Geometry convention: the base station sits at the origin of a 2-D plane,
angles are measured from broadside (the +y axis), so a target at angle theta
and range d has Cartesian position d * (sin theta, cos theta). Headings and
aspect angles use the same convention. Doppler is positive for a closing
target: f' = 2 * (-d_dot) / wavelength.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import RngStream

SPEED_OF_LIGHT = 299_792_458.0


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watts_to_dbm(watts: float) -> float:
    return 10.0 * math.log10(watts) + 30.0


@dataclass(frozen=True)
class RadioConfig:
    """Narrowband monostatic RF front-end parameters."""

    carrier_hz: float = 28e9
    n_tx: int = 32
    n_rx: int = 32
    n_slots: int = 64
    slot_s: float = 1e-3
    tx_power_w: float = dbm_to_watts(43.0)
    noise_power_w: float = dbm_to_watts(-90.0)

    def __post_init__(self):
        for name in ("carrier_hz", "slot_s", "tx_power_w"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"RadioConfig.{name} must be positive")
        if self.noise_power_w < 0:
            raise ConfigError("RadioConfig.noise_power_w must be non-negative")
        for name in ("n_tx", "n_rx", "n_slots"):
            if getattr(self, name) < 1:
                raise ConfigError(f"RadioConfig.{name} must be >= 1")

    @property
    def wavelength_m(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    @property
    def block_s(self) -> float:
        return self.n_slots * self.slot_s


@dataclass(frozen=True)
class TypeProfile:
    """Type-dependent motion and scattering profile."""

    name: str
    speed_mps: float
    turn_prob: float
    turn_std_deg: float
    amp_jitter_db: float
    glint_prob: float
    glint_db: float
    phase_ar: float
    phase_vel_std_deg: float
    sign_flip_prob: float


TYPE_PROFILES = {
    "pedestrian": TypeProfile("pedestrian", 1.5, 0.3, 20.0, 0.8, 0.02, 4.0, 0.985, 0.8, 0.02),
    "car": TypeProfile("car", 15.0, 0.1, 5.0, 0.3, 0.01, 6.0, 0.995, 0.15, 0.005),
    "drone": TypeProfile("drone", 20.0, 0.2, 10.0, 1.0, 0.08, 10.0, 0.975, 1.2, 0.05),
}

TYPE_ORDER = ("pedestrian", "car", "drone")


@dataclass(frozen=True)
class SceneParams:
    """Scene-level bounds and mobility/scattering constants."""

    r_min_m: float = 10.0
    r_cell_m: float = 50.0
    theta_max_rad: float = math.pi / 3.0
    clutter_power_w: float = dbm_to_watts(-55.0)
    clutter_doppler_std_hz: float = 5.0
    clutter_rho: float = 0.99
    velocity_jitter_std: float = 1.0
    speed_pull: float = 0.95
    amp_ar: float = 0.995
    turn_mean_blocks: float = 5.0
    glint_gate_deg: float = 15.0

    def __post_init__(self):
        if not (0 < self.r_min_m < self.r_cell_m):
            raise ConfigError("need 0 < r_min < r_cell")
        if not (0 < self.theta_max_rad <= math.pi / 2):
            raise ConfigError("theta_max must lie in (0, pi/2]")


@dataclass
class TargetState:
    q: int
    type_name: str
    theta: float
    range_m: float
    velocity: np.ndarray  # Cartesian (vx, vy), m/s
    heading: float
    amp: float  # scattering amplitude AR state (linear)
    amp_nominal: float
    phase: float
    phase_velocity: float  # rad/block
    turn_blocks_left: int = 0
    turn_rate: float = 0.0
    glint_active: bool = False

    @property
    def position(self) -> np.ndarray:
        return self.range_m * np.array([math.sin(self.theta), math.cos(self.theta)])

    @property
    def amp_effective(self) -> float:
        profile = TYPE_PROFILES[self.type_name]
        return self.amp * 10.0 ** (profile.glint_db / 20.0) if self.glint_active else self.amp

    @property
    def radial_speed(self) -> float:
        """Range rate d_dot (positive = receding)."""
        p = self.position
        return float(p @ self.velocity) / self.range_m


@dataclass
class ClutterPatch:
    p: int
    angle: float
    range_m: float
    alpha: complex
    doppler_hz: float
    power_scale: float  # multiplies path gain to reach the normalized level

    def coefficient(self, wavelength_m: float) -> complex:
        return self.power_scale * path_gain(self.range_m, wavelength_m) * self.alpha


@dataclass
class SceneState:
    block: int
    targets: list[TargetState]
    clutter: list[ClutterPatch]
    params: SceneParams
    radio: RadioConfig


def steering_vector(theta: float, n_elems: int) -> np.ndarray:
    """Unit-norm half-wavelength ULA steering vector: entry k is
    exp(j*pi*k*sin(theta)) / sqrt(n_elems)."""
    k = np.arange(n_elems)
    return np.exp(1j * np.pi * k * math.sin(theta)) / math.sqrt(n_elems)


def steering_matrix(thetas: np.ndarray, n_elems: int) -> np.ndarray:
    """Columns are steering vectors for each angle; shape (n_elems, len(thetas))."""
    k = np.arange(n_elems)[:, None]
    return np.exp(1j * np.pi * k * np.sin(np.asarray(thetas))[None, :]) / math.sqrt(n_elems)


def path_gain(d: float, wavelength_m: float) -> float:
    """Two-way free-space amplitude attenuation (wavelength / 4 pi d)^2."""
    if d <= 0:
        raise ValueError("distance must be positive")
    return (wavelength_m / (4.0 * math.pi * d)) ** 2


def init_scene(
    radio: RadioConfig,
    params: SceneParams,
    n_targets: int,
    n_clutter: int,
    stream: RngStream,
) -> SceneState:
    """Create the block-1 scene: targets on a uniform angle grid with uniform
    ranges, types assigned round-robin, CN(0,1) initial scattering, and
    clutter patches normalized so the total expected clutter echo power
    (through an isotropic reference beam at full transmit power) matches the
    configured level."""
    if n_targets <= 0:
        raise ConfigError("need at least one target")
    if n_clutter < 0:
        raise ConfigError("clutter count must be non-negative")

    if n_targets == 1:
        angles = np.array([0.0])
    else:
        angles = np.linspace(-params.theta_max_rad, params.theta_max_rad, n_targets)
    ranges = stream.uniform(n_targets, params.r_min_m, params.r_cell_m)
    headings = stream.uniform(n_targets, -math.pi, math.pi)
    beta = stream.cnormal(n_targets)

    targets = []
    for q in range(n_targets):
        type_name = TYPE_ORDER[q % 3]
        profile = TYPE_PROFILES[type_name]
        pv_std = math.radians(profile.phase_vel_std_deg)
        pv0 = float(stream.normal(1)[0]) * pv_std
        amp0 = abs(beta[q])
        velocity = profile.speed_mps * np.array(
            [math.sin(headings[q]), math.cos(headings[q])]
        )
        targets.append(
            TargetState(
                q=q,
                type_name=type_name,
                theta=float(angles[q]),
                range_m=float(ranges[q]),
                velocity=velocity,
                heading=float(headings[q]),
                amp=amp0,
                amp_nominal=amp0,
                phase=float(np.angle(beta[q])),
                phase_velocity=pv0,
            )
        )

    clutter: list[ClutterPatch] = []
    if n_clutter > 0:
        c_angles = stream.uniform(n_clutter, -params.theta_max_rad, params.theta_max_rad)
        c_ranges = stream.uniform(n_clutter, params.r_min_m, params.r_cell_m)
        c_dopplers = stream.normal(n_clutter) * params.clutter_doppler_std_hz
        c_alpha = stream.cnormal(n_clutter)
        # Equal per-patch share of the total clutter echo power budget,
        # referenced to an isotropic beam: n_c * c^2 * P_tx / n_tx = P_clutter.
        coeff = math.sqrt(
            params.clutter_power_w * radio.n_tx / (radio.tx_power_w * n_clutter)
        )
        for p in range(n_clutter):
            gain = path_gain(float(c_ranges[p]), radio.wavelength_m)
            clutter.append(
                ClutterPatch(
                    p=p,
                    angle=float(c_angles[p]),
                    range_m=float(c_ranges[p]),
                    alpha=complex(c_alpha[p]),
                    doppler_hz=float(c_dopplers[p]),
                    power_scale=coeff / gain,
                )
            )

    return SceneState(block=1, targets=targets, clutter=clutter, params=params, radio=radio)


def _rotate(v: np.ndarray, delta: float) -> np.ndarray:
    c, s = math.cos(delta), math.sin(delta)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def _wrap_angle(a: float) -> float:
    return math.atan2(math.sin(a), math.cos(a))


def _geometric_blocks(stream: RngStream, mean: float) -> int:
    if mean <= 1.0:
        return 1
    u = float(stream.uniform(1)[0])
    p = 1.0 / mean
    return 1 + int(math.log(max(1.0 - u, 1e-300)) / math.log(1.0 - p))


def _advance_target(t: TargetState, params: SceneParams, block_s: float, stream: RngStream) -> TargetState:
    profile = TYPE_PROFILES[t.type_name]
    t = replace(t, velocity=t.velocity.copy())

    # 1. velocity: Gaussian jitter, then pull speed back toward the nominal.
    t.velocity = t.velocity + params.velocity_jitter_std * stream.normal(2)
    speed = float(np.linalg.norm(t.velocity))
    if speed > 1e-12:
        target_speed = params.speed_pull * speed + (1.0 - params.speed_pull) * profile.speed_mps
        t.velocity = t.velocity * (target_speed / speed)

    # 2. random turns: rate drawn once at onset, applied each block it lasts.
    if t.turn_blocks_left > 0:
        t.velocity = _rotate(t.velocity, t.turn_rate)
        t.turn_blocks_left -= 1
    elif bool(stream.bernoulli(profile.turn_prob)[0]):
        t.turn_rate = float(stream.normal(1)[0]) * math.radians(profile.turn_std_deg)
        t.turn_blocks_left = _geometric_blocks(stream, params.turn_mean_blocks) - 1
        t.velocity = _rotate(t.velocity, t.turn_rate)
    t.heading = math.atan2(t.velocity[0], t.velocity[1])

    # 3. move, then reflect at the range/angle boundaries.
    pos = t.position + block_s * t.velocity
    d = float(np.linalg.norm(pos))
    theta = math.atan2(pos[0], pos[1])
    u_r = np.array([math.sin(theta), math.cos(theta)])
    u_t = np.array([math.cos(theta), -math.sin(theta)])
    v_r = float(t.velocity @ u_r)
    v_t = float(t.velocity @ u_t)
    if d > params.r_cell_m:
        d = 2.0 * params.r_cell_m - d
        v_r = -v_r
    elif d < params.r_min_m:
        d = 2.0 * params.r_min_m - d
        v_r = -v_r
    if theta > params.theta_max_rad:
        theta = 2.0 * params.theta_max_rad - theta
        v_t = -v_t
    elif theta < -params.theta_max_rad:
        theta = -2.0 * params.theta_max_rad - theta
        v_t = -v_t
    t.range_m = min(max(d, params.r_min_m), params.r_cell_m)
    t.theta = min(max(theta, -params.theta_max_rad), params.theta_max_rad)
    t.velocity = v_r * u_r + v_t * u_t
    t.heading = math.atan2(t.velocity[0], t.velocity[1])

    # 4. log-amplitude AR(1) around the nominal level, in dB-scaled jitter.
    jitter = float(stream.normal(1)[0]) * profile.amp_jitter_db * math.log(10.0) / 20.0
    log_amp = params.amp_ar * math.log(t.amp) + (1.0 - params.amp_ar) * math.log(t.amp_nominal) + jitter
    t.amp = math.exp(log_amp)

    # 5. aspect-gated glint, one block long.
    fires = bool(stream.bernoulli(profile.glint_prob)[0])
    aspect_to_bs = math.atan2(-t.position[0], -t.position[1])
    gate = abs(_wrap_angle(t.heading - aspect_to_bs)) < math.radians(params.glint_gate_deg)
    t.glint_active = fires and gate

    # 6. scattering phase: AR(1) phase velocity with rare sign flips.
    pv_std = math.radians(profile.phase_vel_std_deg)
    innovation = float(stream.normal(1)[0]) * pv_std * math.sqrt(max(0.0, 1.0 - profile.phase_ar**2))
    t.phase_velocity = profile.phase_ar * t.phase_velocity + innovation
    if bool(stream.bernoulli(profile.sign_flip_prob)[0]):
        t.phase_velocity = -t.phase_velocity
    t.phase = _wrap_angle(t.phase + t.phase_velocity)
    return t


def advance_scene(scene: SceneState, stream: RngStream) -> SceneState:
    """Evolve the scene by one block (targets in index order, then clutter)."""
    targets = [
        _advance_target(t, scene.params, scene.radio.block_s, stream) for t in scene.targets
    ]
    clutter = scene.clutter
    if clutter:
        rho = scene.params.clutter_rho
        w = stream.cnormal(len(clutter))
        clutter = [
            replace(c, alpha=rho * c.alpha + math.sqrt(1.0 - rho**2) * complex(w[i]))
            for i, c in enumerate(clutter)
        ]
    return SceneState(
        block=scene.block + 1,
        targets=targets,
        clutter=clutter,
        params=scene.params,
        radio=scene.radio,
    )


def synthesize_echo(
    scene: SceneState,
    transmit: np.ndarray,
    noise_stream: RngStream | None = None,
) -> np.ndarray:
    """Received echo matrix (n_rx x n_slots) for a transmit block
    (n_tx x n_slots): target and clutter rank-one returns with per-slot
    Doppler rotation plus white noise CN(0, noise_power I)."""
    radio = scene.radio
    transmit = np.asarray(transmit)
    if transmit.shape != (radio.n_tx, radio.n_slots):
        raise DimensionError(
            f"transmit must be {(radio.n_tx, radio.n_slots)}, got {transmit.shape}"
        )
    lam = radio.wavelength_m
    t_n = np.arange(radio.n_slots) * radio.slot_s
    echo = np.zeros((radio.n_rx, radio.n_slots), dtype=np.complex128)

    if scene.targets:
        thetas = np.array([t.theta for t in scene.targets])
        betas = np.array(
            [
                path_gain(t.range_m, lam) * t.amp_effective * np.exp(1j * t.phase)
                for t in scene.targets
            ]
        )
        dopplers = np.array([2.0 * (-t.radial_speed) / lam for t in scene.targets])
        a_r = steering_matrix(thetas, radio.n_rx)
        gains = steering_matrix(thetas, radio.n_tx).conj().T @ transmit  # (Q, N)
        rotation = np.exp(2j * np.pi * dopplers[:, None] * t_n[None, :])
        echo += a_r @ (betas[:, None] * rotation * gains)

    if scene.clutter:
        angles = np.array([c.angle for c in scene.clutter])
        gammas = np.array([c.coefficient(lam) for c in scene.clutter])
        dopplers = np.array([c.doppler_hz for c in scene.clutter])
        a_r = steering_matrix(angles, radio.n_rx)
        gains = steering_matrix(angles, radio.n_tx).conj().T @ transmit
        rotation = np.exp(2j * np.pi * dopplers[:, None] * t_n[None, :])
        echo += a_r @ (gammas[:, None] * rotation * gains)

    if noise_stream is not None and radio.noise_power_w > 0:
        noise = noise_stream.cnormal(radio.n_rx * radio.n_slots, var=radio.noise_power_w)
        echo += noise.reshape(radio.n_rx, radio.n_slots)
    return echo


def scene_record(scene: SceneState, include_clutter: bool = False) -> dict:
    """JSON-serializable snapshot of the scene (one record per block)."""
    record = {
        "block": scene.block,
        "targets": [
            {
                "q": t.q,
                "type": t.type_name,
                "theta": t.theta,
                "range": t.range_m,
                "velocity": [float(v) for v in t.velocity],
                "heading": t.heading,
                "amp": t.amp,
                "phase": t.phase,
            }
            for t in scene.targets
        ],
    }
    if include_clutter:
        record["clutter"] = [
            {
                "p": c.p,
                "angle": c.angle,
                "range": c.range_m,
                "alpha": [c.alpha.real, c.alpha.imag],
            }
            for c in scene.clutter
        ]
    return record
