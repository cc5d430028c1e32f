"""Maxwell-Bloch integration of the adiabatically eliminated ORCA ladder.

Both model tiers share one tensor engine. State tensors are indexed
``S_gs[z, v, g, s]`` and ``S_gd[z, v, g, d]`` over Chebyshev nodes, velocity
classes and sublevel pairs; the four-level tier is the case of one sublevel per
manifold with unit couplings and a single polarization channel.

Time is stepped with RK4 in the co-moving frame while pulses are on. In every
stage the signal is re-solved along z by Chebyshev collocation from the current
coherences, so the coupled system keeps fourth order in time. Between pulses
the coherences evolve diagonally and are propagated in closed form. Windows
holding only transfer pulses are z- and signal-independent; their propagator is
computed once and cached.

Rabi frequencies entering the equations are half the pulse Rabi frequency, so
a transfer of area pi swaps s and d completely.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from . import chebyshev
from .atomics import LevelScheme, VelocityGrid
from .errors import ConfigError, DivergenceError, ValidationError
from .fields import PulseEnvelope, WavevectorSet, area_to_peak, envelope, polarization_vector
from .protocol import PulseEvent, PulseSequence

TIERS = ("four-level", "hyperfine")
TWO_PI = 2 * math.pi
PAD_FWHM = 4.0  # envelopes are treated as zero beyond this many FWHM from center
_PHASE_BOUND = 0.1  # rad per step


@dataclass(frozen=True)
class SolverConfig:
    scheme: LevelScheme
    velocities: VelocityGrid
    wavevectors: WavevectorSet
    optical_depth: float
    detuning: float  # single-photon detuning, Hz
    gamma_e: float  # rad/s
    gamma_s: float  # rad/s
    gamma_d: float  # rad/s
    n_z: int = 16
    length: float = 0.075  # m; reporting only, z is scaled to [0, 1]
    dt: float = 2.0  # ps
    tier: str = "four-level"
    populated_transition: bool = False
    two_photon_detuning: float = 0.0  # Hz
    three_photon_detuning: float = 0.0  # Hz
    tau_span: tuple[float, float] | None = None  # ns
    gamma_e_ref: float | None = None  # rad/s; linewidth unit of the optical depth

    def __post_init__(self):
        if self.tier not in TIERS:
            raise ConfigError(f"unknown tier {self.tier!r}")
        if self.n_z < 4:
            raise ValidationError(f"n_z={self.n_z} < 4 Chebyshev points")
        if not self.dt > 0:
            raise ValidationError("time step must be positive")
        if min(self.gamma_e, self.gamma_s, self.gamma_d) < 0:
            raise ValidationError("decay rates must be non-negative")

    @property
    def h(self) -> float:
        return self.dt * 1e-3

    @property
    def optical_depth_rate(self) -> float:
        """d * gamma_e in rad/ns; gamma_e here is the natural value, not the configured one."""
        ref = self.gamma_e_ref if self.gamma_e_ref is not None else self.scheme.levels["e"].gamma
        return self.optical_depth * ref * 1e-9

    def fingerprint(self) -> str:
        return config_fingerprint(self)


def config_fingerprint(cfg: SolverConfig, extra=None) -> str:
    s = cfg.scheme
    payload = {
        "tier": cfg.tier,
        "n_z": cfg.n_z,
        "dt_ps": cfg.dt,
        "od": cfg.optical_depth,
        "detuning_hz": cfg.detuning,
        "gammas": [cfg.gamma_e, cfg.gamma_s, cfg.gamma_d, cfg.gamma_e_ref],
        "deltas": [cfg.two_photon_detuning, cfg.three_photon_detuning],
        "populated": cfg.populated_transition,
        "k": [cfg.wavevectors.k_s, cfg.wavevectors.k_c, cfg.wavevectors.k_t],
        "v": np.round(cfg.velocities.velocities, 9).tolist(),
        "w": np.round(cfg.velocities.weights, 15).tolist(),
        "hfs": {k: [lv.A_hfs, lv.B_hfs, lv.J] for k, lv in s.levels.items()},
        "subs": {k: len(v) for k, v in s.sublevels.items()},
        "rho": np.round(s.ground_population, 15).tolist(),
        "tau_span": cfg.tau_span,
        "extra": extra,
    }
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class CoherenceState:
    S_gs: np.ndarray
    S_gd: np.ndarray
    tau: float


@dataclass
class SimulationRecord:
    tau: np.ndarray  # ns
    E_out: np.ndarray  # (n_tau, nQ) at the cell exit
    E_in: np.ndarray  # (n_tau, nQ)
    snapshots: dict  # requested time -> CoherenceState
    events: list
    fingerprint: str
    weights: np.ndarray  # velocity weights
    z_weights: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def h(self) -> float:
        return float(self.tau[1] - self.tau[0]) if len(self.tau) > 1 else 0.0

    def energy(self, window=None, which="out") -> float:
        """Trapezoid-free rectangle sum of |E|^2 dtau over grid points in [lo, hi)."""
        E = self.E_out if which == "out" else self.E_in
        power = np.sum(np.abs(E) ** 2, axis=1)
        if window is None:
            return float(power.sum() * self.h)
        lo, hi = window
        mask = (self.tau >= lo) & (self.tau < hi)
        return float(power[mask].sum() * self.h)


# ---------------------------------------------------------------------------
# model tensors


@dataclass
class _Model:
    nQ: int
    T_ge: np.ndarray  # (a, j, Q) with sqrt(rho) folded in
    T_es: np.ndarray  # (j, q, Q)
    T_sd: np.ndarray  # (q, b, Q)
    a: np.ndarray  # (v, a, j) = 1/(gamma_e + i Delta_s)
    sqd: np.ndarray  # (v,)
    lam_s: np.ndarray  # (v, a, q)
    lam_d: np.ndarray  # (v, a, b)
    groups: list  # ground indices sharing identical (lam_s, lam_d)
    P_in: np.ndarray
    P_src: np.ndarray
    n_z: int
    G: np.ndarray = None  # (v*a*j, Q) signal source weights
    T_ge_flat: np.ndarray = None  # (Q, a*j)
    asqd: np.ndarray = None  # i * sqd * a, (v, a, j)

    def __post_init__(self):
        self.G = (self.sqd[:, None, None, None] * self.T_ge[None] * self.a[..., None]).reshape(-1, self.nQ)
        self.T_ge_flat = self.T_ge.reshape(-1, self.nQ).T.astype(complex)
        self.asqd = 1j * self.sqd[:, None, None] * self.a

    def project(self, pol) -> np.ndarray:
        if self.nQ == 1:
            return np.ones(1, dtype=complex)
        return polarization_vector(pol)


def _hz(x):
    return TWO_PI * x * 1e-9  # Hz -> rad/ns


def build_model(cfg: SolverConfig) -> _Model:
    v = np.asarray(cfg.velocities.velocities)
    w = np.asarray(cfg.velocities.weights)
    kv = cfg.wavevectors
    ks_v = kv.k_s * v * 1e-9
    kgs_v = kv.k_gs * v * 1e-9
    kgd_v = (kv.k_gd if kv.k_t is not None else kv.k_gs) * v * 1e-9
    ge, gs, gd = cfg.gamma_e * 1e-9, cfg.gamma_s * 1e-9, cfg.gamma_d * 1e-9
    scheme = cfg.scheme
    if cfg.tier == "four-level":
        one = np.ones((1, 1, 1))
        T_ge = T_es = T_sd = one
        off_g = off_e = off_s = off_d = np.zeros(1)
        rho = np.ones(1)
        nQ = 1
    else:
        T_ge, T_es, T_sd = (np.asarray(scheme.tables[t]) for t in ("ge", "es", "sd"))
        if T_ge.shape[0] != len(scheme.ground_population) or T_es.shape[1] != T_sd.shape[0]:
            raise ConfigError("level scheme tables do not match the hyperfine tier")
        rho = np.asarray(scheme.ground_population)
        off_g = scheme.offsets("g") - max(scheme.offsets("g"))
        off_e, off_s, off_d = scheme.offsets("e"), scheme.offsets("s"), scheme.offsets("d")
        nQ = 3
    MHz = TWO_PI * 1e-3  # MHz -> rad/ns
    # only populated ground sublevels are kept
    keep = np.nonzero(rho > 0)[0]
    rho, off_g, T_ge = rho[keep], off_g[keep], T_ge[keep]
    T_ge = T_ge * np.sqrt(rho)[:, None, None]

    delta_s = (_hz(cfg.detuning) + ks_v[:, None, None]
               - MHz * (off_e[None, None, :] - off_g[None, :, None]))
    a = 1.0 / (ge + 1j * delta_s)
    lam_s = gs + 1j * (_hz(cfg.two_photon_detuning) + kgs_v[:, None, None]
                       - MHz * (off_s[None, None, :] - off_g[None, :, None]))
    lam_d = gd + 1j * (_hz(cfg.three_photon_detuning) + kgd_v[:, None, None]
                       - MHz * (off_d[None, None, :] - off_g[None, :, None]))
    d_rate = cfg.optical_depth_rate
    sqd = np.sqrt(d_rate * w)

    M = np.zeros((nQ, nQ), dtype=complex)
    if cfg.populated_transition:
        # sum_v d_v sum_{a,j} T[a,j,Q] T[a,j,Q'] a[v,a,j]
        M = -np.einsum("v,vaj,ajq,ajp->qp", d_rate * w, a, T_ge, T_ge)
    P_in, P_src = chebyshev.boundary_solver(cfg.n_z, M)

    groups = {}
    for i, og in enumerate(off_g):
        groups.setdefault(round(float(og), 9), []).append(i)
    return _Model(nQ, T_ge, T_es, T_sd, a, sqd, lam_s, lam_d, list(groups.values()), P_in, P_src, cfg.n_z)


def check_time_step(cfg: SolverConfig, model: _Model | None = None):
    """Raise ValidationError when dt * max|two/three-photon detuning| >= 0.1 rad."""
    model = model or build_model(cfg)
    worst = max(np.max(np.abs(model.lam_s.imag)), np.max(np.abs(model.lam_d.imag)))
    if cfg.h * worst >= _PHASE_BOUND:
        raise ValidationError(
            f"time step {cfg.dt} ps violates dt*max|Delta_III| < {_PHASE_BOUND} rad "
            f"(got {cfg.h * worst:.3g} rad; need dt < {_PHASE_BOUND / worst * 1e3:.3g} ps)")


# ---------------------------------------------------------------------------
# pulse envelopes on the grid


def event_envelope(ev: PulseEvent) -> PulseEnvelope:
    peak = area_to_peak(ev.area, ev.fwhm) * complex(math.cos(ev.phase), math.sin(ev.phase))
    return PulseEnvelope(ev.channel, ev.time, ev.fwhm, peak, 0.0, ev.chirp, ev.polarization)


def signal_envelope(ev: PulseEvent, tau) -> np.ndarray:
    """Unit-energy signal amplitude (ns^-1/2); ``fwhm`` is the intensity FWHM."""
    w = ev.fwhm * 1e-3
    dt = np.asarray(tau) - ev.time
    norm = (4 * math.log(2) / math.pi) ** 0.25 / math.sqrt(w)
    return ev.amplitude * norm * np.exp(-2 * math.log(2) * (dt / w) ** 2)


def _half_width(ev: PulseEvent) -> float:
    w = ev.fwhm * 1e-3
    return PAD_FWHM * w * (math.sqrt(2) if ev.channel == "signal" else 1.0)


class _Fields:
    """Channel amplitudes evaluated on arbitrary times (rad/ns, half Rabi)."""

    def __init__(self, seq: PulseSequence, model: _Model):
        self.model = model
        self.finite = [e for e in seq.events if e.fwhm > 0]
        self.pols = {id(e): model.project(e.polarization) for e in self.finite}
        self.envs = {id(e): event_envelope(e) for e in self.finite if e.channel != "signal"}

    def at(self, channel: str, tau: np.ndarray) -> np.ndarray:
        out = np.zeros((len(tau), self.model.nQ), dtype=complex)
        for e in self.finite:
            if e.channel != channel:
                continue
            hw = _half_width(e)
            sel = np.abs(tau - e.time) <= hw
            if not sel.any():
                continue
            if channel == "signal":
                amp = signal_envelope(e, tau[sel])
            else:
                amp = 0.5 * envelope(self.envs[id(e)], tau[sel]) * 1e-9
            out[sel] += amp[:, None] * self.pols[id(e)][None, :]
        return out


# ---------------------------------------------------------------------------
# right-hand side


def _mm(A, B):
    """Contract the trailing axis of A with B as one 2-D BLAS product."""
    return (A.reshape(-1, A.shape[-1]) @ B).reshape(A.shape[:-1] + (B.shape[1],))


def _signal_field(model: _Model, W, S, E_in):
    """Solve dE/dz over the Chebyshev nodes; returns E (n_z, nQ) and Y."""
    nz = model.n_z
    if W is None:
        Y = None
        src = np.zeros((nz - 1) * model.nQ, dtype=complex)
    else:
        Y = _mm(S, W.T)  # (z, v, a, j)
        src = 1j * (Y[1:].reshape(nz - 1, -1) @ model.G).reshape(-1)
    E = (model.P_in @ E_in + model.P_src @ src).reshape(nz, model.nQ)
    return E, Y


def _rhs(model: _Model, W, X, E_in, S, Sd):
    E, Y = _signal_field(model, W, S, E_in)
    dS = -model.lam_s * S
    if W is not None:
        # a * (Y + i sqd * sum_Q T_ge E_Q), then back to s via conj(W)
        drive = (E @ model.T_ge_flat).reshape(E.shape[0], 1, *model.a.shape[1:])
        U = model.a * Y + model.asqd * drive
        dS -= _mm(U, W.conj())
    dSd = -model.lam_d * Sd
    if X is not None:
        dS -= 1j * _mm(Sd, X.T)
        dSd -= 1j * _mm(S, X.conj())
    return dS, dSd, E


# ---------------------------------------------------------------------------
# timeline


@dataclass
class _Segment:
    k0: int
    k1: int
    active: bool
    channels: frozenset = frozenset()


def _timeline(seq: PulseSequence, tau0: float, h: float, K: int):
    spans = []
    for e in seq.events:
        if e.fwhm == 0:
            continue
        hw = _half_width(e)
        spans.append((e.time - hw, e.time + hw, e.channel))
    spans.sort()
    merged = []
    for lo, hi, ch in spans:
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
            merged[-1][2].add(ch)
        else:
            merged.append([lo, hi, {ch}])
    segs = []
    k = 0
    for lo, hi, chans in merged:
        a = max(0, int(math.floor((lo - tau0) / h)))
        b = min(K, int(math.ceil((hi - tau0) / h)))
        if a > k:
            segs.append(_Segment(k, a, False))
        if b > max(a, k):
            segs.append(_Segment(max(a, k), b, True, frozenset(chans)))
        k = max(k, b)
    if k < K:
        segs.append(_Segment(k, K, False))
    return segs


def _grid(seq: PulseSequence, cfg: SolverConfig):
    h = cfg.h
    if cfg.tau_span is not None:
        lo, hi = cfg.tau_span
    else:
        lo = min(e.time - _half_width(e) for e in seq.events) - h
        hi = max(e.time + _half_width(e) for e in seq.events) + h
    k_lo = int(math.floor(lo / h + 1e-9))
    k_hi = int(math.ceil(hi / h - 1e-9))
    tau = np.arange(k_lo, k_hi + 1) * h
    return tau, k_lo * h


# ---------------------------------------------------------------------------
# transfer-only propagators

# Both caches are keyed on everything that determines their content, so a hit
# returns exactly what recomputation would. They are per-process.
_PROPAGATOR_CACHE: dict = {}
_CACHE_LIMIT = 64
_WINDOW_CACHE: dict = {}
_WINDOW_LIMIT = 8


def _remember(cache: dict, key, value, limit: int):
    if len(cache) >= limit:
        cache.pop(next(iter(cache)))
    cache[key] = value


def _transfer_propagator(model: _Model, fields: _Fields, tau_seg: np.ndarray, h: float, key):
    """Propagator over a transfer-only window for each (v, ground group).

    Returns ``{group_index: Phi}`` with Phi of shape (v, n, n), n = n_q + n_b,
    acting on concatenated (S_gs, S_gd) row vectors.
    """
    if key in _PROPAGATOR_CACHE:
        return _PROPAGATOR_CACHE[key]
    nq, nb = model.lam_s.shape[2], model.lam_d.shape[2]
    n = nq + nb
    t_half = np.empty(2 * len(tau_seg) - 1)
    t_half[0::2] = tau_seg
    t_half[1::2] = tau_seg[:-1] + h / 2
    D_all = fields.at("transfer", t_half)
    X_all = np.tensordot(D_all, model.T_sd, axes=([1], [2]))  # (t, q, b)
    out = {}
    for gi, members in enumerate(model.groups):
        rep = members[0]
        ls = model.lam_s[:, rep, :][None]  # (1, v, q)
        ld = model.lam_d[:, rep, :][None]
        nv = ls.shape[1]
        S = np.zeros((n, nv, nq), dtype=complex)
        Sd = np.zeros((n, nv, nb), dtype=complex)
        S[np.arange(nq), :, np.arange(nq)] = 1
        Sd[nq + np.arange(nb), :, np.arange(nb)] = 1

        def f(S, Sd, X):
            return (-ls * S - 1j * (Sd @ X.T), -ld * Sd - 1j * (S @ X.conj()))

        for k in range(len(tau_seg) - 1):
            X0, Xm, X1 = X_all[2 * k], X_all[2 * k + 1], X_all[2 * k + 2]
            k1 = f(S, Sd, X0)
            k2 = f(S + 0.5 * h * k1[0], Sd + 0.5 * h * k1[1], Xm)
            k3 = f(S + 0.5 * h * k2[0], Sd + 0.5 * h * k2[1], Xm)
            k4 = f(S + h * k3[0], Sd + h * k3[1], X1)
            S = S + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            Sd = Sd + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        Phi = np.concatenate([S, Sd], axis=2).transpose(1, 0, 2)  # (v, n_in, n_out)
        out[gi] = Phi
    _remember(_PROPAGATOR_CACHE, key, out, _CACHE_LIMIT)
    return out


def clear_cache():
    _PROPAGATOR_CACHE.clear()
    _WINDOW_CACHE.clear()


def _ideal_transfer(model: _Model, ev: PulseEvent, S, Sd):
    pol = model.project(ev.polarization)
    Xh = np.tensordot(model.T_sd, pol, axes=([2], [0])) * complex(math.cos(ev.phase), math.sin(ev.phase))
    nq, nb = Xh.shape
    H = np.zeros((nq + nb, nq + nb), dtype=complex)
    H[:nq, nq:] = Xh
    H[nq:, :nq] = Xh.conj().T
    U = expm(-0.5j * ev.area * H)
    y = np.concatenate([S, Sd], axis=-1) @ U.T
    return y[..., :nq].copy(), y[..., nq:].copy()


# ---------------------------------------------------------------------------
# driver


def _run(cfg: SolverConfig, seq: PulseSequence, snapshot_times=(), progress=None) -> SimulationRecord:
    model = build_model(cfg)
    check_time_step(cfg, model)
    h = cfg.h
    tau, tau0 = _grid(seq, cfg)
    K = len(tau) - 1
    if cfg.tau_span is not None:
        for e in seq.events:
            if not tau[0] <= e.time <= tau[-1]:
                raise ValidationError(f"{e.channel} event at {e.time} ns outside tau span {cfg.tau_span}")
    fields = _Fields(seq, model)
    nz, nv = cfg.n_z, model.lam_s.shape[0]
    na, nq, nb = model.lam_s.shape[1], model.lam_s.shape[2], model.lam_d.shape[2]
    S = np.zeros((nz, nv, na, nq), dtype=complex)
    Sd = np.zeros((nz, nv, na, nb), dtype=complex)
    E_out = np.zeros((len(tau), model.nQ), dtype=complex)
    E_in = fields.at("signal", tau)

    def idx(t):
        return int(round((t - tau0) / h))

    ideal = {}
    for e in seq.events:
        if e.fwhm == 0:
            ideal.setdefault(idx(e.time), []).append(e)
    snaps_at = {}
    for t in snapshot_times:
        k = idx(t)
        if not 0 <= k <= K:
            raise ValidationError(f"snapshot time {t} ns outside the simulated span")
        snaps_at.setdefault(k, []).append(t)
    snapshots = {}
    breakpoints = sorted(set(ideal) | set(snaps_at))

    def at_breakpoint(k, S, Sd):
        for t in snaps_at.get(k, ()):
            snapshots[t] = CoherenceState(S.copy(), Sd.copy(), float(tau[k]))
        for ev in ideal.get(k, ()):
            S, Sd = _ideal_transfer(model, ev, S, Sd)
        return S, Sd

    def free(S, Sd, n):
        return S * np.exp(-model.lam_s * h * n), Sd * np.exp(-model.lam_d * h * n)

    stats = {"rk4_steps": 0, "cached_windows": 0}
    segs = _timeline(seq, tau0, h, K)
    for seg in segs:
        inner = [b for b in breakpoints if seg.k0 <= b < seg.k1]
        if not seg.active:
            k = seg.k0
            for b in inner + [seg.k1]:
                if b > k:
                    S, Sd = free(S, Sd, b - k)
                    k = b
                if b < seg.k1 or (b == seg.k1 == K):
                    S, Sd = at_breakpoint(b, S, Sd)
            continue
        key = None
        if not inner:
            lo, hi = tau[seg.k0], tau[seg.k1]
            evs = tuple(sorted(json.dumps(e.to_dict(), sort_keys=True) for e in fields.finite
                               if lo - _half_width(e) <= e.time <= hi + _half_width(e)))
            digest = hashlib.sha1(S.tobytes() + Sd.tobytes()).hexdigest()
            key = ("window", cfg.fingerprint(), round(float(lo), 9), seg.k1 - seg.k0, evs, digest)
        hit = _WINDOW_CACHE.get(key) if key else None
        if hit is not None:
            S, Sd, E_seg = hit
            E_out[seg.k0:seg.k1 + 1] = E_seg
            stats["cached_windows"] += 1
        else:
            S, Sd = _active_segment(cfg, model, fields, seg, tau, h, S, Sd, E_out, E_in,
                                    inner, at_breakpoint, stats)
            if key:
                _remember(_WINDOW_CACHE, key, (S, Sd, E_out[seg.k0:seg.k1 + 1].copy()), _WINDOW_LIMIT)
        if not (np.all(np.isfinite(S)) and np.all(np.isfinite(Sd))):
            raise DivergenceError(float(tau[seg.k1]))
        if progress:
            progress(seg.k1 / K)
    if segs and segs[-1].active and K in breakpoints:
        S, Sd = at_breakpoint(K, S, Sd)
    meta = {
        "tier": cfg.tier,
        "dt_ps": cfg.dt,
        "n_z": cfg.n_z,
        "n_velocity": nv,
        "nQ": model.nQ,
        "input_energy": float(np.sum(np.abs(E_in) ** 2) * h),
        "final_excitation_gs": float(_excitation(S)),
        "final_excitation_gd": float(_excitation(Sd)),
        **stats,
    }
    return SimulationRecord(
        tau=tau,
        E_out=E_out,
        E_in=E_in,
        snapshots=snapshots,
        events=[e.to_dict() for e in seq.events],
        fingerprint=config_fingerprint(cfg, seq.to_dict()),
        weights=np.asarray(cfg.velocities.weights),
        z_weights=chebyshev.quad_weights(cfg.n_z),
        meta=meta,
    )


def _excitation(S) -> float:
    wz = chebyshev.quad_weights(S.shape[0])
    return float(np.tensordot(wz, np.abs(S) ** 2, axes=(0, 0)).sum())


def stored_excitation(state: CoherenceState) -> float:
    """Number of stored excitations: sum over classes/sublevels of the z-integral of |S|^2."""
    return _excitation(state.S_gs) + _excitation(state.S_gd)


def _active_segment(cfg, model, fields, seg, tau, h, S, Sd, E_out, E_in, inner, at_breakpoint, stats):
    ks = np.arange(seg.k0, seg.k1 + 1)
    t_seg = tau[ks]
    has_c = "control" in seg.channels
    has_t = "transfer" in seg.channels
    has_s = "signal" in seg.channels
    if has_t and not has_c and not has_s and not inner:
        key = (cfg.fingerprint(), round(h, 12), len(t_seg),
               tuple((e.channel, round(e.time - t_seg[0], 9), e.area, e.fwhm, e.chirp, str(e.polarization), e.phase)
                     for e in fields.finite if t_seg[0] <= e.time <= t_seg[-1]))
        props = _transfer_propagator(model, fields, t_seg, h, key)
        y = np.concatenate([S, Sd], axis=-1)
        out = np.empty_like(y)
        for gi, members in enumerate(model.groups):
            out[:, :, members, :] = np.einsum("zvan,vnm->zvam", y[:, :, members, :], props[gi])
        nq = S.shape[-1]
        stats["cached_windows"] += 1
        return out[..., :nq].copy(), out[..., nq:].copy()

    t_half = np.empty(2 * len(t_seg) - 1)
    t_half[0::2] = t_seg
    t_half[1::2] = t_seg[:-1] + h / 2
    C_all = fields.at("control", t_half) if has_c else None
    D_all = fields.at("transfer", t_half) if has_t else None
    Ein_all = fields.at("signal", t_half) if has_s else np.zeros((len(t_half), model.nQ), dtype=complex)
    inner_set = set(inner)

    def coup(i):
        W = np.tensordot(C_all[i], model.T_es, axes=([0], [2])) if has_c else None  # (j, q)
        X = np.tensordot(D_all[i], model.T_sd, axes=([0], [2])) if has_t else None  # (q, b)
        return W, X

    for n, k in enumerate(range(seg.k0, seg.k1)):
        if k in inner_set:
            S, Sd = at_breakpoint(k, S, Sd)
        W0, X0 = coup(2 * n)
        Wm, Xm = coup(2 * n + 1)
        W1, X1 = coup(2 * n + 2)
        k1 = _rhs(model, W0, X0, Ein_all[2 * n], S, Sd)
        E_out[k] = k1[2][-1]
        k2 = _rhs(model, Wm, Xm, Ein_all[2 * n + 1], S + 0.5 * h * k1[0], Sd + 0.5 * h * k1[1])
        k3 = _rhs(model, Wm, Xm, Ein_all[2 * n + 1], S + 0.5 * h * k2[0], Sd + 0.5 * h * k2[1])
        k4 = _rhs(model, W1, X1, Ein_all[2 * n + 2], S + h * k3[0], Sd + h * k3[1])
        S = S + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        Sd = Sd + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        stats["rk4_steps"] += 1
    W, _ = coup(2 * (seg.k1 - seg.k0))
    E_end, _ = _signal_field(model, W, S, Ein_all[-1])
    E_out[seg.k1] = E_end[-1]
    return S, Sd


def run_four_level(cfg: SolverConfig, seq: PulseSequence, snapshot_times=(), progress=None) -> SimulationRecord:
    if cfg.tier != "four-level":
        raise ConfigError(f"run_four_level needs tier 'four-level', got {cfg.tier!r}")
    return _run(cfg, seq, snapshot_times, progress)


def run_hyperfine(cfg: SolverConfig, seq: PulseSequence, snapshot_times=(), progress=None) -> SimulationRecord:
    if cfg.tier != "hyperfine":
        raise ConfigError(f"run_hyperfine needs tier 'hyperfine', got {cfg.tier!r}")
    return _run(cfg, seq, snapshot_times, progress)


def run(cfg: SolverConfig, seq: PulseSequence, snapshot_times=(), progress=None) -> SimulationRecord:
    return _run(cfg, seq, snapshot_times, progress)


def propagate_field_slice(state: CoherenceState, E_in, cfg: SolverConfig, control=None) -> np.ndarray:
    """Signal E(z, Q) on the Chebyshev nodes for frozen coherences.

    ``control`` is the per-polarization control amplitude (rad/s, full Rabi) at
    this instant; without it the coherences act as no source.
    """
    model = build_model(cfg)
    E_in = np.atleast_1d(np.asarray(E_in, dtype=complex))
    W = None
    if control is not None:
        C = 0.5 * np.atleast_1d(np.asarray(control, dtype=complex)) * 1e-9
        W = np.tensordot(C, model.T_es, axes=([0], [2]))
    E, _ = _signal_field(model, W, state.S_gs, E_in)
    return E


def collective_coherence(record: SimulationRecord, t: float, normalize_to: float | str | None = None) -> dict:
    """Velocity-weighted, z-averaged coherence per stored channel at snapshot ``t``.

    Each class is weighted by sqrt(w_v), the amplitude it couples to the signal
    with. ``normalize_to`` may be another snapshot time (divide by its total
    magnitude) or ``"phased"``: divide by the same sum with the z-integrated
    amplitude of every class rotated into phase. Without decay the
    phased reference is constant after storage, so the ratio isolates dephasing.
    """
    if t not in record.snapshots:
        raise KeyError(f"no snapshot at t={t} ns")
    st = record.snapshots[t]
    sw = np.sqrt(record.weights)

    def collect(gs, gd):
        return {
            "gs": np.einsum("z,v,zvas->as", record.z_weights, sw, gs),
            "gd": np.einsum("z,v,zvab->ab", record.z_weights, sw, gd),
        }

    out = collect(st.S_gs, st.S_gd)
    if normalize_to is not None:
        if normalize_to == "phased":
            # align the z-summed amplitude of every class (and sublevel pair)
            wz = record.z_weights
            ref = {
                "gs": np.einsum("v,vas->as", sw, np.abs(np.tensordot(wz, st.S_gs, axes=(0, 0)))),
                "gd": np.einsum("v,vab->ab", sw, np.abs(np.tensordot(wz, st.S_gd, axes=(0, 0)))),
            }
        else:
            ref = collective_coherence(record, normalize_to)
        scale = np.sqrt(np.sum(np.abs(ref["gs"]) ** 2) + np.sum(np.abs(ref["gd"]) ** 2))
        out = {k: v / scale for k, v in out.items()}
    if out["gs"].size == 1:
        out = {k: complex(v.reshape(-1)[0]) for k, v in out.items()}
    return out


def with_tier(cfg: SolverConfig, tier: str) -> SolverConfig:
    return replace(cfg, tier=tier)
