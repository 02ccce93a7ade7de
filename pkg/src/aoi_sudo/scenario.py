"""Scenario files: deterministic generation and JSON round-tripping.

A scenario fully determines a `SystemModel`: process matrices, channel
statistics, discount, staleness cap. Generation follows the standard
protocol used throughout the experiments: 2-d processes with spectral radii
drawn uniformly from (1, 1.3), unit-norm scalar measurements, identity noise
covariances, and Rayleigh-derived level distributions over five quantized
channel states with drop rates 0.01 / 0.05 / 0.10 / 0.15 / 0.20 ordered so
that higher levels drop more packets.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .model import ChannelModel, CostTable, ProcessModel, SystemModel

SCENARIO_VERSION = 1

DEFAULT_DROP_RATES = {
    5: [0.01, 0.05, 0.10, 0.15, 0.20],
    2: [0.05, 0.20],
}

RAYLEIGH_SCALE_RANGE = (0.5, 2.0)
SPECTRAL_RADIUS_RANGE = (1.0, 1.3)
GAIN_THRESHOLD_RANGE = (0.5, 2.0)


def rayleigh_level_dist(scale: float, levels: int) -> np.ndarray:
    """Bin probabilities of a Rayleigh gain, best (highest) gain bin first.

    Bin edges are fixed at levels-1 points spanning GAIN_THRESHOLD_RANGE;
    the top bin maps to level 1 (lowest drop rate).
    """
    if levels == 1:
        return np.ones(1)
    edges = np.linspace(*GAIN_THRESHOLD_RANGE, levels - 1)
    cdf = 1.0 - np.exp(-(edges ** 2) / (2.0 * scale ** 2))
    full = np.concatenate([[0.0], cdf, [1.0]])
    bins = np.diff(full)            # ascending gain order
    return bins[::-1].copy()        # level 1 = highest gain bin


def random_process_matrices(rng: np.random.Generator,
                            radius_range=SPECTRAL_RADIUS_RANGE) -> dict:
    """2x2 state matrix rescaled to an exact target spectral radius."""
    target = rng.uniform(*radius_range)
    while True:
        a = rng.normal(size=(2, 2))
        rho = np.max(np.abs(np.linalg.eigvals(a)))
        if rho > 1e-6:
            break
    a = a * (target / rho)
    c = rng.normal(size=(1, 2))
    c = c / np.linalg.norm(c)
    return {"A": a, "C": c, "W": np.eye(2), "V": np.eye(1),
            "spectral_radius": float(target)}


def generate_scenario(n_devices: int, n_channels: int, seed: int, *,
                      gbar: int = 5, gamma: float = 0.99,
                      delta_cap: int = 200, colocated: bool = False,
                      drop_rates: list[float] | None = None) -> dict:
    """Pure function of (arguments, seed) -> scenario document."""
    if n_channels >= n_devices:
        raise ValueError("need fewer channels than devices")
    if drop_rates is None:
        if gbar not in DEFAULT_DROP_RATES:
            raise ValueError(f"no default drop rates for {gbar} levels; pass them")
        drop_rates = DEFAULT_DROP_RATES[gbar]
    if len(drop_rates) != gbar:
        raise ValueError("drop rate list length must equal the level count")
    rng = np.random.default_rng(seed)
    devices = [random_process_matrices(rng) for _ in range(n_devices)]
    if colocated:
        scales = np.tile(rng.uniform(*RAYLEIGH_SCALE_RANGE, size=(1, n_channels)),
                         (n_devices, 1))
    else:
        scales = rng.uniform(*RAYLEIGH_SCALE_RANGE, size=(n_devices, n_channels))
    level_dist = np.empty((n_devices, n_channels, gbar))
    for n in range(n_devices):
        for m in range(n_channels):
            level_dist[n, m] = rayleigh_level_dist(scales[n, m], gbar)
    drop = np.tile(np.asarray(drop_rates, dtype=float), (n_devices, n_channels, 1))
    return {
        "version": SCENARIO_VERSION,
        "n_devices": n_devices,
        "n_channels": n_channels,
        "gbar": gbar,
        "gamma": gamma,
        "delta_cap": delta_cap,
        "colocated": colocated,
        "seed": seed,
        "devices": [
            {k: (v.tolist() if isinstance(v, np.ndarray) else v)
             for k, v in dev.items()}
            for dev in devices
        ],
        "channels": {
            "drop_rate": drop.tolist(),
            "level_dist": level_dist.tolist(),
            "rayleigh_scale": scales.tolist(),
        },
    }


def scenario_from_parts(devices: list[dict], drop_rate, level_dist,
                        rayleigh_scale, *, gamma: float, delta_cap: int,
                        n_channels: int, colocated: bool = False,
                        seed: int = 0) -> dict:
    """Assemble a scenario document from explicit arrays (fixture helper)."""
    drop = np.asarray(drop_rate, dtype=float)
    return {
        "version": SCENARIO_VERSION,
        "n_devices": len(devices),
        "n_channels": n_channels,
        "gbar": drop.shape[-1],
        "gamma": gamma,
        "delta_cap": delta_cap,
        "colocated": colocated,
        "seed": seed,
        "devices": [
            {k: (np.asarray(v).tolist() if k != "spectral_radius" else v)
             for k, v in dev.items()}
            for dev in devices
        ],
        "channels": {
            "drop_rate": np.asarray(drop_rate, dtype=float).tolist(),
            "level_dist": np.asarray(level_dist, dtype=float).tolist(),
            "rayleigh_scale": np.asarray(rayleigh_scale, dtype=float).tolist(),
        },
    }


def build_model(doc: dict) -> SystemModel:
    """Instantiate the runtime model from a scenario document."""
    if doc.get("version") != SCENARIO_VERSION:
        raise ValueError(f"unsupported scenario version {doc.get('version')}")
    processes = []
    for dev in doc["devices"]:
        proc = ProcessModel.build(dev["A"], dev["C"], dev["W"], dev["V"])
        processes.append(proc)
    costs = CostTable.tabulate(processes, int(doc["delta_cap"]))
    ch = doc["channels"]
    channels = ChannelModel(
        levels=int(doc["gbar"]),
        drop_rate=np.asarray(ch["drop_rate"], dtype=float),
        level_dist=np.asarray(ch["level_dist"], dtype=float),
        rayleigh_scale=np.asarray(ch["rayleigh_scale"], dtype=float),
        colocated=bool(doc.get("colocated", False)),
    )
    return SystemModel(processes=processes, costs=costs, channels=channels,
                       n_channels=int(doc["n_channels"]),
                       gamma=float(doc["gamma"]))


def save_scenario(doc: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_scenario(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def load_model(path: str | Path) -> SystemModel:
    return build_model(load_scenario(path))


def scenario_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
