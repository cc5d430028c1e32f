"""Run configuration: a YAML document turned into solver and protocol objects.

A run file is a nested mapping with ``schema_version: 1``. Every section is
optional and falls back to the named ``preset`` (or to ``paper-main``); keys
that the schema does not know are rejected so a misspelt physics parameter
can never be silently ignored.

Sections::

    schema_version: 1
    preset: paper-main | paper-appB | paper-appB-stretched
    species: path/to/species.yaml   # null -> shipped data file
    atoms:    {temperature_K, n_classes, span_sigma, optical_depth,
               ground_population, hfs}
    beams:    {signal_nm, control_nm, transfer_nm, directions}
    solver:   {tier, detuning_GHz, decay, gamma_e_per_ns, gamma_s_per_ns,
               gamma_d_per_ns, n_z, length_m, dt_ps, populated_transition,
               two_photon_detuning_MHz, three_photon_detuning_MHz}
    pulses:   {signal_fwhm_ps, control_fwhm_ps, transfer_fwhm_ps, control_area,
               transfer_area, control_energy_nJ, transfer_energy_nJ,
               pi_energy_nJ: {control, transfer}, transfer_chirp_Hz_per_ns,
               polarizations: {signal, control, transfer}, window_ns}
    protocol: {name, params} or {events: [...]}
    sweep:    {axes: [{path, values} | {path, start, stop, num}]}
    output:   {dir, snapshots}
    seed: 0
    workers: null
"""

from __future__ import annotations

import copy
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import atomics, fields, protocol
from .errors import ConfigError, ValidationError
from .solver import SolverConfig

SCHEMA_VERSION = 1
WORKERS_ENV = "ORCAMEM_WORKERS"

_BASE = {
    "schema_version": SCHEMA_VERSION,
    "preset": None,
    "species": None,
    "atoms": {
        "temperature_K": 393.15,
        "n_classes": 33,
        "span_sigma": 4.0,
        "optical_depth": 1.0e4,
        "ground_population": "thermal",
        "hfs": {},
    },
    "beams": {
        "signal_nm": 1529.3,
        "control_nm": 780.241,
        "transfer_nm": 792.7,
        "directions": [-1, 1, -1],
    },
    "solver": {
        "tier": "four-level",
        "detuning_GHz": 6.0,
        "decay": "natural",
        "gamma_e_per_ns": None,
        "gamma_s_per_ns": None,
        "gamma_d_per_ns": None,
        "n_z": 16,
        "length_m": 0.075,
        "dt_ps": 2.0,
        "populated_transition": False,
        "two_photon_detuning_MHz": 0.0,
        "three_photon_detuning_MHz": 0.0,
    },
    "pulses": {
        "signal_fwhm_ps": 330.0,
        "control_fwhm_ps": 330.0,
        "transfer_fwhm_ps": 330.0,
        "control_area": 6.0,
        "transfer_area": math.pi,
        "control_energy_nJ": None,
        "transfer_energy_nJ": None,
        "pi_energy_nJ": {"control": 3.29, "transfer": 2.24},
        "transfer_chirp_Hz_per_ns": 0.0,
        "polarizations": {"signal": "sigma+", "control": "sigma+", "transfer": "sigma+"},
        "window_ns": protocol.READOUT_WINDOW_NS,
    },
    "protocol": {"name": "rephased", "params": {"T": 6.25}},
    "sweep": {"axes": []},
    "output": {"dir": "orcamem-out", "snapshots": []},
    "seed": 0,
    "workers": None,
}

PRESETS = {
    # 7.5 cm cell at 120 C, telecom signal, 6 GHz detuning, 330 ps pulses
    "paper-main": {},
    # 14 cm cell at ~70 C with the signal on the 780 nm leg
    "paper-appB": {
        "atoms": {"temperature_K": 343.15, "n_classes": 65},
        "beams": {"signal_nm": 780.241, "control_nm": 1529.3, "directions": [-1, 1, 1]},
        "solver": {"tier": "hyperfine", "length_m": 0.14, "dt_ps": 10.0, "n_z": 12,
                   "populated_transition": True},
        "pulses": {"signal_fwhm_ps": 500.0, "window_ns": 1.2,
                   "polarizations": {"signal": "H", "control": "V", "transfer": "V"}},
        "protocol": {"name": "rephased", "params": {"storage_time": 20.0}},
    },
}
# Optically pumped variant: one sigma+ pathway, chirped transfers (adiabatic
# passage at 3 pi area reaches ~99.5% per-pulse transfer in the model).
PRESETS["paper-appB-stretched"] = {
    **PRESETS["paper-appB"],
    "atoms": {**PRESETS["paper-appB"]["atoms"], "ground_population": "stretched"},
    "pulses": {**PRESETS["paper-appB"]["pulses"], "transfer_area": 3 * math.pi,
               "transfer_chirp_Hz_per_ns": 3.2e10,
               "polarizations": {"signal": "sigma+", "control": "sigma+", "transfer": "sigma+"}},
}

# Leaves whose value is free-form (mappings or lists the schema does not enumerate).
_OPAQUE = {("atoms", "hfs"), ("atoms", "ground_population"), ("protocol", "params"),
           ("protocol", "events"), ("sweep", "axes"), ("output", "snapshots"),
           ("beams", "directions")}
_OPTIONAL = {("protocol", "events"), ("protocol", "name"), ("protocol", "params")}


def _merge(base: dict, over: dict, path=()) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        here = path + (key,)
        if key not in base and here not in _OPTIONAL:
            raise ConfigError(f"unknown config key {'.'.join(here)!r}")
        if isinstance(base.get(key), dict) and here not in _OPAQUE:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {'.'.join(here)!r} must be a mapping")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve(raw: dict) -> dict:
    """Layer ``raw`` over its preset and the base defaults; unknown keys raise."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    preset = raw.get("preset") or "paper-main"
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = _merge(_merge(_BASE, PRESETS[preset]), raw)
    merged["preset"] = preset
    if "events" in raw.get("protocol", {}):
        merged["protocol"] = {"events": raw["protocol"]["events"]}
    return merged


def load(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    cfg = resolve(raw)
    if cfg["species"] is not None:
        species = Path(cfg["species"])
        if not species.is_absolute():
            species = path.parent / species
        cfg["species"] = str(species)
    return cfg


def preset(name: str, **sections) -> dict:
    """Resolved config for a named preset with optional section overrides."""
    return resolve({"schema_version": SCHEMA_VERSION, "preset": name, **sections})


# ---------------------------------------------------------------------------
# dotted paths for sweeps


def get_path(cfg: dict, path: str):
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"sweep path {path!r} does not exist")
        node = node[part]
    return node


def set_path(cfg: dict, path: str, value) -> dict:
    out = copy.deepcopy(cfg)
    parts = path.split(".")
    node = out
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"sweep path {path!r} does not exist")
        node = node[part]
    # protocol parameters are free-form; everything else must already exist
    if parts[-1] not in node and parts[:2] != ["protocol", "params"]:
        raise ConfigError(f"sweep path {path!r} does not exist")
    node[parts[-1]] = value
    return out


def sweep_axes(cfg: dict) -> list[tuple[str, list]]:
    axes = cfg["sweep"]["axes"]
    if not axes:
        raise ConfigError("sweep needs at least one axis")
    out = []
    for ax in axes:
        if not isinstance(ax, dict) or "path" not in ax:
            raise ConfigError(f"bad sweep axis {ax!r}")
        if "values" in ax:
            values = list(ax["values"])
        elif {"start", "stop", "num"} <= set(ax):
            values = np.linspace(float(ax["start"]), float(ax["stop"]), int(ax["num"])).tolist()
        else:
            raise ConfigError(f"sweep axis {ax['path']!r} needs values or start/stop/num")
        if not values:
            raise ConfigError(f"sweep axis {ax['path']!r} is empty")
        if ax["path"].split(".")[:2] != ["protocol", "params"]:
            get_path(cfg, ax["path"])
        out.append((ax["path"], values))
    return out


def sweep_points(cfg: dict) -> list[dict]:
    """Cartesian product of the sweep axes, first axis slowest."""
    points = [cfg]
    for path, values in sweep_axes(cfg):
        points = [set_path(p, path, v) for p in points for v in values]
    for p in points:
        p["sweep"] = {"axes": []}
    return points


def workers(cfg: dict, override: int | None = None) -> int:
    n = override if override is not None else cfg.get("workers")
    if n is None:
        n = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(n)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"worker count {n!r} is not an integer") from exc
    if n < 1:
        raise ConfigError("worker count must be >= 1")
    return n


# ---------------------------------------------------------------------------
# building solver inputs


def _area(section: dict, channel: str) -> float:
    """Pulse area from an energy in nJ when given, else the configured area."""
    energy = section[f"{channel}_energy_nJ"]
    if energy is None:
        return float(section[f"{channel}_area"])
    pi_energy = section["pi_energy_nJ"].get(channel)
    if not pi_energy or pi_energy <= 0:
        raise ConfigError(f"pulses.pi_energy_nJ.{channel} must be positive to use energies")
    if energy < 0:
        raise ValidationError(f"{channel} energy must be non-negative")
    # Rabi frequency scales with the field amplitude, i.e. sqrt(pulse energy)
    return math.pi * math.sqrt(energy / pi_energy)


def energy_to_area(energy_nJ, pi_energy_nJ: float):
    return math.pi * np.sqrt(np.asarray(energy_nJ, dtype=float) / pi_energy_nJ)


def _polarization(p):
    if isinstance(p, list):
        return tuple(complex(*c) if isinstance(c, list) else complex(c) for c in p)
    return p


def pulse_defaults(cfg: dict) -> protocol.PulseDefaults:
    p = cfg["pulses"]
    pol = p["polarizations"]
    unknown = set(pol) - set(fields.CHANNELS)
    if unknown:
        raise ConfigError(f"unknown polarization channels {sorted(unknown)}")
    return protocol.PulseDefaults(
        signal_fwhm=float(p["signal_fwhm_ps"]),
        control_fwhm=float(p["control_fwhm_ps"]),
        transfer_fwhm=float(p["transfer_fwhm_ps"]),
        control_area=_area(p, "control"),
        transfer_area=_area(p, "transfer"),
        transfer_chirp=float(p["transfer_chirp_Hz_per_ns"]),
        signal_polarization=_polarization(pol.get("signal", "sigma+")),
        control_polarization=_polarization(pol.get("control", "sigma+")),
        transfer_polarization=_polarization(pol.get("transfer", "sigma+")),
        window_width=None if p["window_ns"] is None else float(p["window_ns"]),
    )


def level_scheme(cfg: dict) -> atomics.LevelScheme:
    a = cfg["atoms"]
    hfs = {k: tuple(v) for k, v in (a.get("hfs") or {}).items()}
    return atomics.build_level_scheme(cfg["species"], ground_population=a["ground_population"],
                                      optical_depth=float(a["optical_depth"]), hfs=hfs)


def _rate(value, lifetime_s, mode):
    if value is not None:
        return float(value) * 1e9
    if mode == "none" or lifetime_s is None:
        return 0.0
    return 1.0 / (2 * lifetime_s)


def solver_config(cfg: dict, scheme: atomics.LevelScheme | None = None) -> SolverConfig:
    scheme = scheme or level_scheme(cfg)
    a, b, s = cfg["atoms"], cfg["beams"], cfg["solver"]
    if s["decay"] not in ("natural", "none"):
        raise ConfigError("solver.decay must be 'natural' or 'none'")
    grid = atomics.velocity_grid(float(a["temperature_K"]), scheme.mass, int(a["n_classes"]),
                                 float(a["span_sigma"]))
    wv = fields.wavevectors(float(b["signal_nm"]), float(b["control_nm"]),
                            None if b["transfer_nm"] is None else float(b["transfer_nm"]),
                            tuple(b["directions"]))
    lv = scheme.levels
    # gamma_e sets the Raman linewidth, so "none" only switches off the s and d losses
    gamma_e = _rate(s["gamma_e_per_ns"], lv["e"].lifetime, "natural")
    return SolverConfig(
        scheme=scheme,
        velocities=grid,
        wavevectors=wv,
        optical_depth=float(a["optical_depth"]),
        detuning=float(s["detuning_GHz"]) * 1e9,
        gamma_e=gamma_e,
        gamma_s=_rate(s["gamma_s_per_ns"], lv["s"].lifetime, s["decay"]),
        gamma_d=_rate(s["gamma_d_per_ns"], lv["d"].lifetime, s["decay"]),
        n_z=int(s["n_z"]),
        length=float(s["length_m"]),
        dt=float(s["dt_ps"]),
        tier=s["tier"],
        populated_transition=bool(s["populated_transition"]),
        two_photon_detuning=float(s["two_photon_detuning_MHz"]) * 1e6,
        three_photon_detuning=float(s["three_photon_detuning_MHz"]) * 1e6,
    )


def _ratio(param, wv):
    if param in (None, "auto"):
        return wv.ratio if wv.k_t is not None else 1.0
    return float(param)


def dephasing_time(solver_cfg: SolverConfig) -> float:
    """1/(|k_gs| sigma_v) in ns: the attached value replaces the 1.1 ns default."""
    return 1e9 / (abs(solver_cfg.wavevectors.k_gs) * solver_cfg.velocities.sigma_v)


def sequence(cfg: dict, solver_cfg: SolverConfig | None = None) -> protocol.PulseSequence:
    """Compile the protocol section.

    ``storage_time`` is accepted in place of ``T`` for the standard and
    rephased protocols; for the latter it is the readout time 2T + 2T/r.
    """
    proto = cfg["protocol"]
    if "events" in proto:
        return protocol.PulseSequence.from_dict({"events": proto["events"], "name": "custom"})
    name = proto.get("name")
    if name not in protocol.PROTOCOLS:
        raise ConfigError(f"unknown protocol {name!r}; see 'protocols list'")
    params = dict(proto.get("params") or {})
    d = pulse_defaults(cfg)
    wv = solver_cfg.wavevectors if solver_cfg is not None else None
    t_deph = params.pop("t_deph", None)
    if t_deph is None:
        t_deph = dephasing_time(solver_cfg) if solver_cfg is not None else protocol.T_DEPH_DEFAULT
    try:
        if name in ("standard", "rephased"):
            ts = params.pop("storage_time", None)
            T = params.pop("T", None)
            r = _ratio(params.pop("r", "auto"), wv) if wv is not None else float(params.pop("r", 1.0))
            if (ts is None) == (T is None):
                raise ConfigError(f"{name} protocol needs exactly one of T or storage_time")
            if params:
                raise ConfigError(f"unknown {name} parameters {sorted(params)}")
            if name == "standard":
                return protocol.build_standard_orca(float(T if T is not None else ts), d, t_deph)
            T = float(T) if T is not None else float(ts) / (2 + 2 / r)
            # very short sweeps may undercut the dephasing time; keep the builder's check meaningful
            return protocol.build_rephased(T, r, d, min(t_deph, 0.99 * T))
        if "r" in params or name in ("multimode", "reorder", "interference"):
            params["r"] = _ratio(params.get("r", "auto"), wv) if wv is not None else float(params.get("r", 1.0))
        if name == "four-bin":
            params.pop("r", None)
        return protocol.PROTOCOLS[name](**params, defaults=d, t_deph=t_deph)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for protocol {name!r}: {exc}") from exc


def storage_time(seq: protocol.PulseSequence) -> float:
    """Time from the first storage control to the last retrieval time."""
    first = min(e.time for e in seq.of("control"))
    return max(seq.retrieval_times) - first if seq.retrieval_times else 0.0


@dataclass(frozen=True)
class Compiled:
    config: dict
    solver: SolverConfig
    sequence: protocol.PulseSequence


def compile_run(cfg: dict) -> Compiled:
    scfg = solver_config(cfg)
    return Compiled(cfg, scfg, sequence(cfg, scfg))
