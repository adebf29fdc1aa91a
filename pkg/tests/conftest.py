import math

import numpy as np

from echotrack.scene import steering_matrix


def fd_max_rel_error(loss_fn, params, grads, picks, h=1e-5):
    """Central finite differences against analytic gradients.

    loss_fn(params) -> float; params is a dict of arrays; grads the analytic
    gradients at the current params; picks a list of (name, flat_index).
    Returns the worst relative error over the picks.
    """
    worst = 0.0
    for name, flat in picks:
        arr = params[name]
        orig = arr.flat[flat]
        arr.flat[flat] = orig + h
        up = loss_fn(params)
        arr.flat[flat] = orig - h
        down = loss_fn(params)
        arr.flat[flat] = orig
        fd = (up - down) / (2.0 * h)
        g = grads[name].flat[flat]
        denom = max(abs(fd), abs(g))
        if denom < 1e-10:
            continue
        worst = max(worst, abs(fd - g) / denom)
    return worst


def pick_params(params, n, stream):
    """n random (name, flat_index) probes across all parameter tensors."""
    names = sorted(params)
    picks = []
    for _ in range(n):
        name = names[int(stream.integers(0, len(names), 1)[0])]
        flat = int(stream.integers(0, params[name].size, 1)[0])
        picks.append((name, flat))
    return picks


def single_source_snapshots(theta, n_rx, n_snapshots, snr_db, stream):
    """Array snapshots of one unit source at the given SNR per antenna with
    unit-power noise: y[n] = a(theta) * s_n + z[n]."""
    # per-antenna signal power |s|^2/n_rx must equal snr * 1 (noise power 1)
    amp = math.sqrt(n_rx * 10.0 ** (snr_db / 10.0))
    a = steering_matrix(np.array([theta]), n_rx)[:, 0]
    symbols = amp * np.exp(2j * np.pi * stream.uniform(n_snapshots))
    noise = stream.cnormal(n_rx * n_snapshots).reshape(n_rx, n_snapshots)
    return a[:, None] * symbols[None, :] + noise


def multi_source_snapshots(thetas, n_rx, n_snapshots, snr_db, stream):
    out = None
    for theta in thetas:
        amp = math.sqrt(n_rx * 10.0 ** (snr_db / 10.0))
        a = steering_matrix(np.array([theta]), n_rx)[:, 0]
        symbols = amp * np.exp(2j * np.pi * stream.uniform(n_snapshots))
        contrib = a[:, None] * symbols[None, :]
        out = contrib if out is None else out + contrib
    out += stream.cnormal(n_rx * n_snapshots).reshape(n_rx, n_snapshots)
    return out
