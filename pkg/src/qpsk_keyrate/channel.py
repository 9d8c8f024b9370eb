"""Phase-invariant Gaussian channel statistics and error-correction leakage.

Bob's conditional state for label x is a displaced thermal state centred
at sqrt(eta) alpha_x with quadrature variance (1 + eta xi) / 2. Noise is
added at the channel output, so the mean photon number picks up eta xi / 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .protocol import N_LABELS, Constellation

SCENARIOS = ("ideal", "untrusted-homodyne", "untrusted-heterodyne-remap", "detector-efficiency")


def transmittance(distance_km: float, attenuation_db_per_km: float = 0.2) -> float:
    if distance_km < 0:
        raise ValueError(f"distance must be >= 0 km, got {distance_km!r}")
    return 10.0 ** (-attenuation_db_per_km * distance_km / 10.0)


@dataclass(frozen=True)
class ChannelParams:
    distance_km: float
    excess_noise: float
    attenuation_db_per_km: float = 0.2

    def __post_init__(self):
        if self.distance_km < 0:
            raise ValueError(f"distance must be >= 0 km, got {self.distance_km!r}")
        if not self.excess_noise >= 0:
            raise ValueError(f"excess noise must be >= 0, got {self.excess_noise!r}")

    @property
    def transmittance(self) -> float:
        return transmittance(self.distance_km, self.attenuation_db_per_km)


@dataclass(frozen=True)
class ChannelStats:
    """Per-label moments and per-quadrature (P0, P1, Pbot) tables of shape (4, 3)."""

    mean_q: np.ndarray
    mean_p: np.ndarray
    mean_n: np.ndarray
    mean_d: np.ndarray
    delta: float
    probs_q: np.ndarray
    probs_p: np.ndarray
    label_probs: tuple = (0.25, 0.25, 0.25, 0.25)

    def bit_table(self, quadrature: str) -> np.ndarray:
        if quadrature == "q":
            return self.probs_q
        if quadrature == "p":
            return self.probs_p
        raise ValueError(f"quadrature must be 'q' or 'p', got {quadrature!r}")


def simulate_moments(c: Constellation, ch: ChannelParams) -> dict:
    eta, xi = ch.transmittance, ch.excess_noise
    alpha = c.states
    return {
        "mean_q": np.sqrt(2 * eta) * alpha.real,
        "mean_p": np.sqrt(2 * eta) * alpha.imag,
        "mean_n": eta * np.abs(alpha) ** 2 + eta * xi / 2,
        "mean_d": eta * 2 * (alpha**2).real,
    }


def _bit_probs(mean: float, delta: float, eta_xi: float) -> tuple[float, float, float]:
    width = np.sqrt(eta_xi + 1.0)
    p0 = 0.5 * erfc((delta - mean) / width)
    p1 = 0.5 * erfc((delta + mean) / width)
    return p0, p1, 1.0 - p0 - p1


def bit_probabilities(x: int, quadrature: str, delta: float, ch: ChannelParams, c: Constellation):
    """(P0, P1, Pbot) for label index ``x`` measured in ``quadrature``."""
    if not delta >= 0:
        raise ValueError(f"post-selection threshold must be >= 0, got {delta!r}")
    eta = ch.transmittance
    alpha = c.states[x]
    if quadrature == "q":
        mean = np.sqrt(2 * eta) * alpha.real
    elif quadrature == "p":
        mean = np.sqrt(2 * eta) * alpha.imag
    else:
        raise ValueError(f"quadrature must be 'q' or 'p', got {quadrature!r}")
    return _bit_probs(mean, delta, eta * ch.excess_noise)


def simulate_channel(c: Constellation, ch: ChannelParams, delta: float) -> ChannelStats:
    moments = simulate_moments(c, ch)
    tables = {
        quad: np.array([bit_probabilities(x, quad, delta, ch, c) for x in range(N_LABELS)])
        for quad in ("q", "p")
    }
    return ChannelStats(
        delta=float(delta),
        probs_q=tables["q"],
        probs_p=tables["p"],
        label_probs=tuple(c.probabilities),
        **moments,
    )


def sifting_probability(stats: ChannelStats, quadrature: str) -> float:
    table = stats.bit_table(quadrature)
    return float(np.dot(stats.label_probs, table[:, 0] + table[:, 1]))


def binary_entropy(p) -> np.ndarray | float:
    p = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -p * np.log2(p) - (1 - p) * np.log2(1 - p)
    h = np.where((p == 0) | (p == 1), 0.0, h)
    return float(h) if h.ndim == 0 else h


def ec_leakage(stats: ChannelStats, beta: float, quadrature: str) -> tuple[float, float, float]:
    """Return (delta_EC, H(Z), H(Z|X)) in bits per sifted round.

    Bits mapped to bot are discarded and the remaining distribution is
    renormalized before any entropy is taken.
    """
    if not 0 < beta <= 1:
        raise ValueError(f"reconciliation efficiency must lie in (0, 1], got {beta!r}")
    table = stats.bit_table(quadrature)
    px = np.asarray(stats.label_probs)
    kept = table[:, 0] + table[:, 1]
    h_z_given_x = float(np.dot(px, binary_entropy(table[:, 0] / kept)))
    p0 = float(np.dot(px, table[:, 0]) / np.dot(px, kept))
    h_z = binary_entropy(p0)
    return (1 - beta) * h_z + beta * h_z_given_x, h_z, h_z_given_x


@dataclass(frozen=True)
class Scenario:
    """Detector model used to turn raw noise figures into an effective excess noise."""

    kind: str = "ideal"
    xi_oth: float = 0.0
    xi_hom: float = 0.002
    insertion_loss_db: float = 0.7
    eta_d: float = 1.0

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.kind!r}; choose from {', '.join(SCENARIOS)}")
        for name in ("xi_oth", "xi_hom", "insertion_loss_db"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"scenario field {name} must be >= 0")
        if not 0 < self.eta_d <= 1:
            raise ValueError(f"detection efficiency must lie in (0, 1], got {self.eta_d!r}")


def scenario_noise(s: Scenario, distance_km: float, attenuation_db_per_km: float = 0.2) -> float:
    """Effective excess noise at the channel input for scenario ``s``.

    The heterodyne remap is the comparison protocol's figure; it is not fed
    into this protocol's key rate.
    """
    eta = transmittance(distance_km, attenuation_db_per_km)
    if s.kind == "ideal":
        return s.xi_oth
    if s.kind == "untrusted-homodyne":
        return s.xi_oth + s.xi_hom / eta
    if s.kind == "detector-efficiency":
        denom = eta * s.eta_d
        if denom == 0:
            raise ValueError("eta * eta_d vanishes; effective noise is undefined")
        return s.xi_oth + s.xi_hom / denom
    return s.xi_oth + 2 * s.xi_hom / (eta * 10 ** (-s.insertion_loss_db / 10))
