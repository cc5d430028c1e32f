"""Compile memory protocols into validated pulse sequences.

Timings are derived from a bookkeeping of the Doppler phase of every stored
time bin, measured in ns of storage-state evolution: the phase grows at rate
1 while the bin sits in the storage state s and falls at rate r = |k_gd|/|k_gs|
while shelved in d. A bin is retrievable when it is in s with phase ~ 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .errors import ConfigError, ValidationError
from .fields import CHANNELS

T_DEPH_DEFAULT = 1.1  # ns
READOUT_WINDOW_NS = 0.984
_TIME_EPS = 1e-9


@dataclass(frozen=True)
class PulseEvent:
    channel: str
    time: float  # ns
    area: float = math.pi  # rad; signal events use ``amplitude`` instead
    fwhm: float = 330.0  # ps; 0 marks an instantaneous (ideal) transfer
    chirp: float = 0.0  # Hz/ns
    polarization: str | tuple = "sigma+"
    phase: float = 0.0  # optical phase, rad
    amplitude: complex = 1.0

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise ConfigError(f"unknown channel {self.channel!r}")
        if self.time < 0:
            raise ValidationError(f"event time {self.time} ns is negative")
        if self.fwhm < 0:
            raise ValidationError("negative FWHM")
        if self.fwhm == 0 and self.channel != "transfer":
            raise ValidationError("only transfer events may be instantaneous")

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["polarization"], tuple):
            d["polarization"] = [[c.real, c.imag] for c in map(complex, d["polarization"])]
        a = complex(d["amplitude"])
        d["amplitude"] = a.real if a.imag == 0 else [a.real, a.imag]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PulseEvent":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown event keys {sorted(unknown)}")
        if isinstance(d.get("polarization"), list):
            d["polarization"] = tuple(complex(re, im) for re, im in d["polarization"])
        if isinstance(d.get("amplitude"), list):
            d["amplitude"] = complex(*d["amplitude"])
        return cls(**d)


@dataclass(frozen=True)
class PulseSequence:
    events: tuple[PulseEvent, ...]
    windows: tuple[tuple[float, float], ...] = ()
    t_deph: float = T_DEPH_DEFAULT
    ratio: float = 1.0
    name: str = "custom"
    retrieval_times: tuple[float, ...] = ()
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ordered = tuple(sorted(self.events, key=lambda e: (e.time, CHANNELS.index(e.channel))))
        object.__setattr__(self, "events", ordered)

    @property
    def bins(self) -> list[tuple[float, complex]]:
        return [(e.time, e.amplitude) for e in self.events if e.channel == "signal"]

    def of(self, channel: str) -> list[PulseEvent]:
        return [e for e in self.events if e.channel == channel]

    @property
    def duration(self) -> float:
        return max(e.time for e in self.events)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "t_deph_ns": self.t_deph,
            "ratio": self.ratio,
            "windows_ns": [list(w) for w in self.windows],
            "retrieval_times_ns": list(self.retrieval_times),
            "params": self.params,
            "events": [e.to_dict() for e in self.events],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PulseSequence":
        try:
            events = tuple(PulseEvent.from_dict(e) for e in d["events"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad sequence description: {exc}") from exc
        return cls(
            events=events,
            windows=tuple(tuple(w) for w in d.get("windows_ns", ())),
            t_deph=float(d.get("t_deph_ns", T_DEPH_DEFAULT)),
            ratio=float(d.get("ratio", 1.0)),
            name=d.get("name", "custom"),
            retrieval_times=tuple(d.get("retrieval_times_ns", ())),
            params=d.get("params", {}),
        )


@dataclass(frozen=True)
class PulseDefaults:
    """Pulse parameters shared by the builders (calibrated presets override these)."""

    signal_fwhm: float = 330.0
    control_fwhm: float = 330.0
    transfer_fwhm: float = 330.0
    control_area: float = 3.0
    transfer_area: float = math.pi
    transfer_chirp: float = 0.0
    signal_polarization: str | tuple = "sigma+"
    control_polarization: str | tuple = "sigma+"
    transfer_polarization: str | tuple = "sigma+"
    window_width: float | None = None  # ns; default 3x signal FWHM

    @property
    def window(self) -> float:
        return self.window_width if self.window_width is not None else 3 * self.signal_fwhm * 1e-3


def signal(t, d: PulseDefaults, amplitude=1.0) -> PulseEvent:
    return PulseEvent("signal", t, 0.0, d.signal_fwhm, 0.0, d.signal_polarization, 0.0, amplitude)


def control(t, d: PulseDefaults) -> PulseEvent:
    return PulseEvent("control", t, d.control_area, d.control_fwhm, 0.0, d.control_polarization)


def transfer(t, d: PulseDefaults, area=None, phase=0.0) -> PulseEvent:
    return PulseEvent("transfer", t, d.transfer_area if area is None else area, d.transfer_fwhm,
                      d.transfer_chirp, d.transfer_polarization, phase)


# ---------------------------------------------------------------------------
# phase bookkeeping


@dataclass
class _Component:
    label: str
    state: str  # "s" or "d"
    phase: float
    stored_at: float


@dataclass
class PhaseTrace:
    """Outcome of replaying a sequence through the phase bookkeeping."""

    retrievals: list = field(default_factory=list)  # (time, [labels])
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def _transfer_kind(area: float, chirp: float = 0.0) -> str:
    if chirp and area > 0:
        return "swap"  # chirped pulses are treated as adiabatic passage
    turns = (area / math.pi) % 2.0
    if min(turns, 2.0 - turns) < 1e-6:
        return "identity"
    if abs(turns - 1.0) < 1e-6:
        return "swap"
    return "mix"


def trace_phases(seq: PulseSequence, t_deph: float | None = None, ratio: float | None = None) -> PhaseTrace:
    """Replay the sequence, recording which bins each retrieval control reads out."""
    t_deph = seq.t_deph if t_deph is None else t_deph
    r = seq.ratio if ratio is None else ratio
    out = PhaseTrace()
    comps: list[_Component] = []
    signal_times = [e.time for e in seq.of("signal")]
    clock = 0.0
    for ev in seq.events:
        dt = ev.time - clock
        for c in comps:
            c.phase += dt if c.state == "s" else -r * dt
        clock = ev.time
        if ev.channel == "transfer":
            kind = _transfer_kind(ev.area, ev.chirp)
            if kind == "swap":
                for c in comps:
                    c.state = "d" if c.state == "s" else "s"
            elif kind == "mix":
                comps = comps + [_Component(c.label, "d" if c.state == "s" else "s", c.phase, c.stored_at)
                                 for c in comps]
        elif ev.channel == "control":
            storing = any(abs(ev.time - t) < _TIME_EPS for t in signal_times)
            readable = [c for c in comps if c.state == "s" and abs(c.phase) < t_deph]
            near = [c for c in comps if c.state == "s" and t_deph <= abs(c.phase) < 3 * t_deph]
            shelved = [c for c in comps if c.state == "d" and abs(c.phase) < t_deph]
            if storing:
                if readable:
                    out.errors.append(f"control at {ev.time} ns stores while bin(s) "
                                      f"{sorted({c.label for c in readable})} are rephased")
                comps.append(_Component(f"t={ev.time:g}", "s", 0.0, ev.time))
            else:
                if readable:
                    labels = sorted({c.label for c in readable})
                    out.retrievals.append((ev.time, labels))
                    comps = [c for c in comps if c not in readable]
                elif shelved:
                    out.errors.append(f"coherence shelved at retrieval ({ev.time} ns)")
                else:
                    out.errors.append(f"no rephased coherence at retrieval control {ev.time} ns")
            if near:
                out.warnings.append(f"control at {ev.time} ns within 3 t_deph of rephasing bin(s) "
                                    f"{sorted({c.label for c in near})} (cross-talk)")
    return out


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple[str, ...]
    warnings: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.errors

    def raise_for_errors(self):
        if self.errors:
            raise ValidationError("; ".join(self.errors))


def _separation_issues(times, t_deph):
    errors, warnings = [], []
    ts = sorted(times)
    for a, b in zip(ts, ts[1:]):
        sep = b - a
        if sep < t_deph:
            errors.append(f"bins at {a} and {b} ns separated by {sep:.3g} ns < t_deph={t_deph:g} ns")
        elif sep < 3 * t_deph:
            warnings.append(f"bins at {a} and {b} ns separated by {sep / t_deph:.2f} t_deph (< 3)")
    return errors, warnings


def validate(seq: PulseSequence, tau_span: tuple[float, float] | None = None) -> ValidationReport:
    """Collect protocol errors and warnings without raising."""
    errors, warnings = _separation_issues([t for t, _ in seq.bins], seq.t_deph)
    sig_half = 1.5 * max((e.fwhm for e in seq.of("signal")), default=0.0) * 1e-3
    for lo, hi in seq.windows:
        if hi <= lo:
            errors.append(f"window ({lo}, {hi}) is empty")
        for t, _ in seq.bins:
            if lo < t + sig_half and hi > t - sig_half:
                errors.append(f"retrieval window ({lo:g}, {hi:g}) overlaps input bin at {t:g} ns")
    if tau_span is not None:
        for e in seq.events:
            if not tau_span[0] <= e.time <= tau_span[1]:
                errors.append(f"{e.channel} event at {e.time} ns outside tau span {tau_span}")
    trace = trace_phases(seq)
    errors += trace.errors
    warnings += trace.warnings
    return ValidationReport(tuple(errors), tuple(warnings))


def _finish(name, events, retrievals, d: PulseDefaults, t_deph, ratio, params) -> PulseSequence:
    half = d.window / 2
    seq = PulseSequence(
        events=tuple(events),
        windows=tuple((t - half, t + half) for t in retrievals),
        t_deph=t_deph,
        ratio=ratio,
        name=name,
        retrieval_times=tuple(retrievals),
        params=params,
    )
    validate(seq).raise_for_errors()
    return seq


def _check_separation(times, t_deph):
    errors, _ = _separation_issues(times, t_deph)
    if errors:
        raise ValidationError("; ".join(errors))


# ---------------------------------------------------------------------------
# builders


def build_standard_orca(T: float, defaults: PulseDefaults = PulseDefaults(), t_deph: float = T_DEPH_DEFAULT
                        ) -> PulseSequence:
    """Store at 0 and read out at T with no transfer pulses."""
    if T < 0:
        raise ValidationError("storage time must be non-negative")
    events = [signal(0.0, defaults), control(0.0, defaults)]
    if T > 0:
        events.append(control(T, defaults))
    half = defaults.window / 2
    return PulseSequence(tuple(events), ((T - half, T + half),) if T > 0 else (), t_deph, 1.0,
                         "standard", (T,), {"T": T})


def build_rephased(T: float, r: float = 1.0, defaults: PulseDefaults = PulseDefaults(),
                   t_deph: float = T_DEPH_DEFAULT) -> PulseSequence:
    """Two-transfer rephasing: control 0, transfers at T and T + 2T/r, readout at 2T + 2T/r."""
    if r <= 0:
        raise ValidationError("wavevector ratio must be positive")
    if T <= t_deph:
        raise ValidationError(f"T={T} ns <= t_deph={t_deph} ns: coherence not yet dephased is "
                              "retrievable early, protocol assumption broken")
    shelved = 2 * T / r
    t_read = 2 * T + shelved
    events = [signal(0.0, defaults), control(0.0, defaults), transfer(T, defaults),
              transfer(T + shelved, defaults), control(t_read, defaults)]
    return _finish("rephased", events, [t_read], defaults, t_deph, r, {"T": T, "r": r})


def _auto_retrievals(bins, transfers, r, t_end_margin):
    """Zero crossings in s for every bin, given storage and transfer times."""
    results = []
    ordered_tr = sorted(transfers)
    for t0 in bins:
        phase, state, clock = 0.0, "s", t0
        hit = None
        for tt in [t for t in ordered_tr if t > t0] + [math.inf]:
            if state == "s" and phase < 0 and clock - phase < tt:
                hit = clock - phase
                break
            if tt is math.inf:
                break
            phase += (tt - clock) if state == "s" else -r * (tt - clock)
            state = "d" if state == "s" else "s"
            clock = tt
        if hit is None:
            raise ValidationError(f"bin at {t0} ns never rephases in the storage state")
        results.append(hit)
    return results


def build_multimode(bin_times, transfer_times, amplitudes=None, r: float = 1.0,
                    defaults: PulseDefaults = PulseDefaults(), t_deph: float = T_DEPH_DEFAULT) -> PulseSequence:
    """Store several bins, apply the given transfers, read each bin out when it rephases.

    ``transfer_times`` is the segment plan; retrieval controls are placed at the
    rephasing time of each bin.
    """
    bin_times = [float(t) for t in bin_times]
    if len(bin_times) < 1:
        raise ValidationError("need at least one bin")
    _check_separation(bin_times, t_deph)
    amplitudes = [1.0] * len(bin_times) if amplitudes is None else list(amplitudes)
    if len(amplitudes) != len(bin_times):
        raise ValidationError("one amplitude per bin required")
    retrievals = _auto_retrievals(bin_times, transfer_times, r, 0.0)
    events = []
    for t, a in zip(bin_times, amplitudes):
        events += [signal(t, defaults, a), control(t, defaults)]
    events += [transfer(t, defaults) for t in transfer_times]
    events += [control(t, defaults) for t in retrievals]
    return _finish("multimode", events, retrievals, defaults, t_deph, r,
                   {"bins": bin_times, "transfers": list(transfer_times), "amplitudes": [abs(a) for a in amplitudes]})


FOUR_BIN_TIMES = (0.0, 4.0, 12.5, 16.5)
FOUR_BIN_TRANSFERS = (6.25, 18.75, 31.25)


def build_four_bin(amplitudes=None, defaults: PulseDefaults = PulseDefaults(),
                          t_deph: float = T_DEPH_DEFAULT) -> PulseSequence:
    """Four bins, three transfers, every bin stored for 25 ns."""
    return build_multimode(FOUR_BIN_TIMES, FOUR_BIN_TRANSFERS, amplitudes, 1.0, defaults, t_deph)


def build_reorder_pair(t1: float, t2: float, r: float = 1.0, margin: float | None = None,
                       defaults: PulseDefaults = PulseDefaults(), t_deph: float = T_DEPH_DEFAULT) -> PulseSequence:
    """Store two bins and retrieve the later one first.

    The first shelving leaves bin 2 with phase -sep/2 and bin 1 with +sep/2, so
    bin 2 rephases at t3; a second transfer pair then rephases bin 1 at t4.
    """
    sep = t2 - t1
    if sep < 3 * t_deph:
        raise ValidationError(f"bins separated by {sep:g} ns; need >= 3 t_deph = {3 * t_deph:g} ns")
    m = sep / 2 if margin is None else margin
    Ta = t2 + m
    Tb = Ta + (m + sep / 2) / r
    t3 = Tb + sep / 2
    Tc = t3 + m
    Td = Tc + (sep + m + sep / 2) / r
    t4 = Td + sep / 2
    events = [signal(t1, defaults), control(t1, defaults), signal(t2, defaults), control(t2, defaults),
              transfer(Ta, defaults), transfer(Tb, defaults), control(t3, defaults),
              transfer(Tc, defaults), transfer(Td, defaults), control(t4, defaults)]
    return _finish("reorder", events, [t3, t4], defaults, t_deph, r,
                   {"t1": t1, "t2": t2, "transfers": [Ta, Tb, Tc, Td]})


def build_interference_pair(t1: float, t2: float, mix_area: float = math.pi / 2, r: float = 1.0,
                            mix_phase: float = 0.0, margin: float | None = None,
                            defaults: PulseDefaults = PulseDefaults(), t_deph: float = T_DEPH_DEFAULT
                            ) -> PulseSequence:
    """Time-domain Mach-Zehnder: mix two stored bins with a partial transfer.

    Bin 1 is shelved before bin 2 arrives; a swap then puts bin 1 in s and bin 2
    in d. The mixing transfer fires when both carry the same Doppler phase.
    Afterwards the d-port is rephased and read at t3, the s-port at t4.
    """
    sep = t2 - t1
    if sep < 3 * t_deph:
        raise ValidationError(f"bins separated by {sep:g} ns; need >= 3 t_deph = {3 * t_deph:g} ns")
    m = sep / 2 if margin is None else margin
    Ta = t1 + sep / 2
    Tb = t2 + m
    phi1 = (Ta - t1) - r * (Tb - Ta)
    phi2 = Tb - t2
    Tm = Tb + (phi2 - phi1) / (1 + r)
    psi = phi1 + (Tm - Tb)
    dc = max(m, (psi + m) / r)
    Tc = Tm + dc
    t3 = Tc - (psi - r * dc)
    phiA_c = psi + dc
    Td = max(t3 + m, Tc + (phiA_c + m) / r)
    t4 = Td - (phiA_c - r * (Td - Tc))
    events = [signal(t1, defaults), control(t1, defaults), transfer(Ta, defaults),
              signal(t2, defaults), control(t2, defaults), transfer(Tb, defaults),
              transfer(Tm, defaults, area=mix_area, phase=mix_phase),
              transfer(Tc, defaults), control(t3, defaults), transfer(Td, defaults), control(t4, defaults)]
    return _finish("interference", events, [t3, t4], defaults, t_deph, r,
                   {"t1": t1, "t2": t2, "mix_area": mix_area, "mix_phase": mix_phase,
                    "transfers": [Ta, Tb, Tm, Tc, Td]})


PROTOCOLS = {
    "standard": build_standard_orca,
    "rephased": build_rephased,
    "multimode": build_multimode,
    "four-bin": build_four_bin,
    "reorder": build_reorder_pair,
    "interference": build_interference_pair,
}

