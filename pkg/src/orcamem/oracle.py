"""Independent reference results for tests.

Nothing here calls into the solver kernels: envelopes, detunings and the field
propagation are rebuilt from the configuration with a deliberately different
scheme: Heun's method with an exponential integrating factor on a fixed fine
time step, and trapezoid marching on a dense uniform z grid. Only the four-level tier is covered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ValidationError

ORACLE_STEP_PS = 0.05
MAX_CLASSES = 9
MAX_NZ = 8
ORACLE_NZ = 201


@dataclass(frozen=True)
class OracleResult:
    value: float | np.ndarray
    method: str
    resolution: dict = field(default_factory=dict)


def analytic_rabi(area: float, detuning: float = 0.0, peak_rabi: float = 0.0) -> float:
    """Upper-state probability after a square pulse on a two-level atom.

    ``area`` = peak_rabi * duration. On resonance this is sin^2(area/2). Off
    resonance the generalized Rabi frequency sqrt(Omega^2 + Delta^2) sets the
    oscillation and Omega^2 / (Omega^2 + Delta^2) its contrast.
    """
    if detuning == 0 or area == 0:
        return math.sin(area / 2) ** 2
    if peak_rabi == 0:
        raise ValidationError("detuned Rabi formula needs a non-zero peak Rabi frequency")
    duration = area / peak_rabi
    gen = math.hypot(peak_rabi, detuning)
    return (peak_rabi / gen) ** 2 * math.sin(gen * duration / 2) ** 2


def analytic_doppler_decay(k: float, sigma_v: float, t: float | np.ndarray):
    """|<exp(i k v t)>| over a Maxwell-Boltzmann velocity distribution."""
    if not sigma_v > 0:
        raise ValidationError("sigma_v must be positive")
    return np.exp(-0.5 * (k * sigma_v * np.asarray(t, dtype=float)) ** 2)


# ---------------------------------------------------------------------------
# brute-force four-level integrator


def _gauss(t, center, fwhm_ns):
    return np.exp(-4 * math.log(2) * ((t - center) / fwhm_ns) ** 2)


def _fields_at(events, t):
    """Half-Rabi control and transfer amplitudes (rad/ns) and the signal (ns^-1/2)."""
    c = d = e = 0j
    for ev in events:
        w = ev.fwhm * 1e-3
        if w == 0 or abs(t - ev.time) > 6 * w:
            continue
        if ev.channel == "signal":
            # w is the intensity FWHM; the intensity integrates to w * sqrt(pi / (4 ln 2))
            g = _gauss(t, ev.time, w * math.sqrt(2))
            e += ev.amplitude * g / math.sqrt(w * math.sqrt(math.pi / (4 * math.log(2))))
            continue
        g = _gauss(t, ev.time, w)
        # Gaussian area is peak * w * sqrt(pi / (4 ln 2)); half of it enters the equations
        peak = ev.area / (w * math.sqrt(math.pi / (4 * math.log(2))))
        amp = 0.5 * peak * g * complex(math.cos(ev.phase), math.sin(ev.phase))
        if ev.chirp:
            amp *= np.exp(1j * math.pi * ev.chirp * 1e-9 * (t - ev.time) ** 2)
        if ev.channel == "control":
            c += amp
        else:
            d += amp
    return c, d, e


def reference_integrate(cfg, seq, step_ps: float = ORACLE_STEP_PS, n_z: int = ORACLE_NZ):
    """Integrate the four-level equations on a fine fixed grid.

    Refuses instances larger than the documented oracle size. Returns a
    SimulationRecord sampled on the oracle step.
    """
    from .solver import SimulationRecord  # record container only

    if cfg.tier != "four-level":
        raise ValidationError("the oracle integrates the four-level tier only")
    nv = len(cfg.velocities.velocities)
    if nv > MAX_CLASSES or cfg.n_z > MAX_NZ:
        raise ValidationError(
            f"oracle instance too large ({nv} classes, n_z={cfg.n_z}); limits are "
            f"{MAX_CLASSES} classes and {MAX_NZ} z points")

    v = np.asarray(cfg.velocities.velocities, dtype=float)
    w = np.asarray(cfg.velocities.weights, dtype=float)
    wv = cfg.wavevectors
    k_gs = wv.k_s + wv.k_c
    k_gd = k_gs + (wv.k_t if wv.k_t is not None else 0.0)
    lifetime_e = cfg.scheme.levels["e"].lifetime
    gamma_ref = cfg.gamma_e_ref if cfg.gamma_e_ref is not None else 1 / (2 * lifetime_e)
    dv = cfg.optical_depth * gamma_ref * 1e-9 * w  # per-class coupling strength, rad/ns
    delta_s = 2 * math.pi * cfg.detuning * 1e-9 + wv.k_s * v * 1e-9
    denom = cfg.gamma_e * 1e-9 + 1j * delta_s
    lam_s = cfg.gamma_s * 1e-9 + 1j * (2 * math.pi * cfg.two_photon_detuning * 1e-9 + k_gs * v * 1e-9)
    lam_d = cfg.gamma_d * 1e-9 + 1j * (2 * math.pi * cfg.three_photon_detuning * 1e-9 + k_gd * v * 1e-9)
    loss = -np.sum(dv / denom) if cfg.populated_transition else 0.0

    h = step_ps * 1e-3
    lo = min(ev.time - 6 * ev.fwhm * 1e-3 for ev in seq.events) if cfg.tau_span is None else cfg.tau_span[0]
    hi = max(ev.time + 6 * ev.fwhm * 1e-3 for ev in seq.events) if cfg.tau_span is None else cfg.tau_span[1]
    n_t = int(math.ceil((hi - lo) / h)) + 1
    tau = lo + h * np.arange(n_t)
    ideal = sorted((ev for ev in seq.events if ev.fwhm == 0), key=lambda e: e.time)

    z = np.linspace(0.0, 1.0, n_z)
    dz = z[1] - z[0]
    grow = np.exp(loss * z)  # homogeneous solution of the z equation
    shrink = np.exp(-loss * z)
    S = np.zeros((n_z, nv), dtype=complex)
    Sd = np.zeros((n_z, nv), dtype=complex)
    rot_s = np.exp(-lam_s * h)
    rot_d = np.exp(-lam_d * h)
    sq = np.sqrt(dv)
    E_out = np.zeros(n_t, dtype=complex)
    E_in = np.zeros(n_t, dtype=complex)
    next_ideal = 0

    def field_along_z(S, c, e_in):
        src = 1j * (S @ (sq / denom)) * c
        integrand = shrink * src
        cum = np.concatenate(([0], np.cumsum((integrand[1:] + integrand[:-1]) * dz / 2)))
        return grow * (e_in + cum)

    def slope(S, Sd, fields):
        c, d, e_in = fields
        E = field_along_z(S, c, e_in)
        dS = -(abs(c) ** 2) * S / denom - 1j * np.conj(c) * sq * E[:, None] / denom - 1j * d * Sd
        return dS, -1j * np.conj(d) * S, E

    now = _fields_at(seq.events, tau[0])
    for n, t in enumerate(tau):
        while next_ideal < len(ideal) and ideal[next_ideal].time <= t + h / 2:
            ev = ideal[next_ideal]
            cth, sth = math.cos(ev.area / 2), math.sin(ev.area / 2)
            ph = complex(math.cos(ev.phase), math.sin(ev.phase))
            S, Sd = cth * S - 1j * ph * sth * Sd, -1j * ph.conjugate() * sth * S + cth * Sd
            next_ideal += 1
        nxt = _fields_at(seq.events, t + h)
        f_s, f_d, E = slope(S, Sd, now)
        E_in[n] = now[2]
        E_out[n] = E[-1]
        # Heun step in the frame rotating with the diagonal decay/detuning
        S_p, Sd_p = rot_s * (S + h * f_s), rot_d * (Sd + h * f_d)
        g_s, g_d, _ = slope(S_p, Sd_p, nxt)
        S = rot_s * S + 0.5 * h * (rot_s * f_s + g_s)
        Sd = rot_d * Sd + 0.5 * h * (rot_d * f_d + g_d)
        now = nxt
        if not (np.isfinite(S).all() and np.isfinite(Sd).all()):
            raise DivergenceError(float(t))

    return SimulationRecord(
        tau=tau,
        E_out=E_out[:, None],
        E_in=E_in[:, None],
        snapshots={},
        events=[ev.to_dict() for ev in seq.events],
        fingerprint="oracle",
        weights=w,
        z_weights=np.full(n_z, 1.0 / n_z),
        meta={"method": "integrating-factor-heun", "step_ps": step_ps, "n_z": n_z},
    )
