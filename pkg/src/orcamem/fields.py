"""Pulse envelopes, polarizations and wavevector bookkeeping.

Units follow the public data types: centers in ns, widths in ps, Rabi
frequencies in rad/s, chirp rates in Hz/ns. The solver converts to ns and rad/ns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError

CHANNELS = ("signal", "control", "transfer")
_AREA_FACTOR = math.sqrt(math.pi / (4 * math.log(2)))
_FWHM_EXP = 4 * math.log(2)

_SQ2 = 1 / math.sqrt(2)
# spherical components (sigma-, pi, sigma+) of the named polarizations, quantization
# axis along the beams
NAMED_POLARIZATIONS = {
    "sigma-": (1, 0, 0),
    "pi": (0, 1, 0),
    "sigma+": (0, 0, 1),
    "H": (_SQ2, 0, -_SQ2),
    "V": (1j * _SQ2, 0, 1j * _SQ2),
}


def polarization_vector(pol) -> np.ndarray:
    """Unit complex 3-vector (sigma-, pi, sigma+) from a name or components."""
    if isinstance(pol, str):
        try:
            vec = np.array(NAMED_POLARIZATIONS[pol], dtype=complex)
        except KeyError:
            raise ConfigError(f"unknown polarization {pol!r}") from None
    else:
        vec = np.asarray(pol, dtype=complex)
        if vec.shape != (3,):
            raise ConfigError("polarization must have three spherical components")
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise ConfigError("zero polarization vector")
    return vec / norm


@dataclass(frozen=True)
class PulseEnvelope:
    channel: str
    center: float  # ns
    fwhm: float  # ps
    peak_rabi: complex  # rad/s
    detuning: float = 0.0  # Hz
    chirp_rate: float = 0.0  # Hz/ns
    polarization: tuple = (0, 0, 1)
    shape: str = "gaussian"

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise ConfigError(f"unknown channel {self.channel!r}")
        if self.shape != "gaussian":
            raise ConfigError(f"only gaussian envelopes are supported, got {self.shape!r}")
        if not self.fwhm > 0:
            raise DomainError("FWHM must be positive")
        object.__setattr__(self, "polarization", tuple(polarization_vector(self.polarization)))

    @property
    def pol(self) -> np.ndarray:
        return np.array(self.polarization, dtype=complex)


def pulse_area(p: PulseEnvelope) -> float:
    """Integral of |Omega(t)| over the Gaussian envelope, in radians."""
    return abs(p.peak_rabi) * p.fwhm * 1e-12 * _AREA_FACTOR


def area_to_peak(area: float, fwhm: float) -> float:
    """Peak Rabi frequency (rad/s) of a Gaussian with the given area and FWHM (ps)."""
    if not fwhm > 0:
        raise DomainError("FWHM must be positive")
    return area / (fwhm * 1e-12 * _AREA_FACTOR)


def envelope(p: PulseEnvelope, tau) -> np.ndarray:
    """Scalar complex envelope (rad/s) at times ``tau`` (ns), chirp included."""
    dt = np.asarray(tau, dtype=float) - p.center
    w = p.fwhm * 1e-3
    value = p.peak_rabi * np.exp(-_FWHM_EXP * (dt / w) ** 2)
    if p.chirp_rate:
        # chirp_rate [Hz/ns] * dt^2 [ns^2] carries a 1e-9 to cycles
        value = value * np.exp(1j * math.pi * p.chirp_rate * 1e-9 * dt**2)
    return value


def rabi_at(p: PulseEnvelope, tau: float) -> np.ndarray:
    """Per-polarization complex Rabi frequency (rad/s) at time ``tau`` (ns)."""
    return complex(envelope(p, tau)) * p.pol


@dataclass(frozen=True)
class WavevectorSet:
    """Signed wavevectors (rad/m) along the propagation axis.

    The two-photon phase-grating wavevector is the signed sum k_s + k_c, so
    counter-propagating beams leave only the magnitude difference; the shelved
    coherence adds k_t.
    """

    k_s: float
    k_c: float
    k_t: float | None = None

    @property
    def k_gs(self) -> float:
        return self.k_c + self.k_s

    @property
    def k_gd(self) -> float:
        if self.k_t is None:
            raise ConfigError("transfer wavelength missing; k_gd undefined")
        return self.k_c + self.k_s + self.k_t

    @property
    def ratio(self) -> float:
        """|k_gd| / |k_gs|, the factor that rescales shelved intervals."""
        return abs(self.k_gd) / abs(self.k_gs)

    @property
    def rephasing(self) -> bool:
        return self.k_t is not None and self.k_gd * self.k_gs < 0


def wavevectors(lambda_s: float, lambda_c: float, lambda_t: float | None = None,
                directions=(-1, 1, -1)) -> WavevectorSet:
    """Signed wavevectors from wavelengths (nm) and beam directions (+1/-1).

    ``directions`` is (signal, control, transfer). The default has the control
    along +z with signal and transfer counter-propagating to it.
    """
    lams = [lambda_s, lambda_c] + ([lambda_t] if lambda_t is not None else [])
    if any(lam is None or lam <= 0 for lam in lams):
        raise DomainError("wavelengths must be positive")
    dirs = list(directions)
    if len(dirs) < len(lams) or any(d not in (1, -1) for d in dirs[: len(lams)]):
        raise DomainError("need a +1/-1 direction for every channel")
    k = [d * 2 * math.pi / (lam * 1e-9) for d, lam in zip(dirs, lams)]
    return WavevectorSet(k[0], k[1], k[2] if lambda_t is not None else None)
