"""Atomic data model: fine/hyperfine/Zeeman structure, couplings, velocity grids.

Quantum numbers are plain floats holding integers or half-integers. They are
converted to exact rationals only when calling the angular-momentum algebra.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml
from scipy import constants
from sympy import Rational
from sympy.physics.wigner import clebsch_gordan, wigner_6j

from .errors import ConfigError, DomainError, ValidationError

LABELS = ("g", "e", "s", "d")
TRANSITIONS = ("ge", "es", "sd")
# polarization index -> spherical component q
POLARIZATIONS = {"sigma-": -1, "pi": 0, "sigma+": 1}
Q_VALUES = (-1, 0, 1)
AMU = constants.atomic_mass
K_B = constants.k


def _rational(x: float) -> Rational:
    twice = round(2 * x)
    if abs(twice - 2 * x) > 1e-9:
        raise DomainError(f"{x} is not an integer or half-integer")
    return Rational(twice, 2)


def _is_half_integer(x: float) -> bool:
    return abs(round(2 * x) - 2 * x) < 1e-9


def allowed_F(I: float, J: float) -> list[float]:
    """Hyperfine quantum numbers |J-I| ... J+I."""
    lo = abs(J - I)
    n = int(round(J + I - lo)) + 1
    return [lo + k for k in range(n)]


def hyperfine_energy(A: float, B: float, I: float, J: float, F: float) -> float:
    """Hyperfine shift (MHz) of level F relative to the fine-structure centroid.

    The quadrupole term is dropped when its denominator vanishes (I or J <= 1/2);
    a nonzero B is then a domain error.
    """
    for name, x in (("I", I), ("J", J), ("F", F)):
        if not _is_half_integer(x) or x < 0:
            raise DomainError(f"{name}={x} must be a non-negative integer or half-integer")
    if not any(abs(F - f) < 1e-9 for f in allowed_F(I, J)):
        raise DomainError(f"F={F} not in allowed range for I={I}, J={J}")
    K = F * (F + 1) - I * (I + 1) - J * (J + 1)
    energy = K * A / 2
    denom = 2 * I * (2 * I - 1) * 2 * J * (2 * J - 1)
    if denom == 0:
        if B != 0:
            raise DomainError(f"quadrupole constant B={B} undefined for I={I}, J={J}")
        return energy
    return energy + (B / 2) * (3 * K * (K + 1) - 4 * I * (I + 1) * J * (J + 1)) / denom


@functools.lru_cache(maxsize=None)
def _raw_coupling(J: float, Jp: float, I: float, F: float, m: float, q: int, Fp: float, mp: float) -> float:
    if abs(mp - (m + q)) > 1e-9 or abs(Fp - F) > 1 + 1e-9:
        return 0.0
    sixj = wigner_6j(_rational(Jp), _rational(Fp), _rational(I), _rational(F), _rational(J), 1)
    if sixj == 0:
        return 0.0
    cg = clebsch_gordan(_rational(F), 1, _rational(Fp), _rational(m), q, _rational(mp))
    phase = (-1) ** int(round(Jp + I + F + 1))
    return float(phase * math.sqrt((2 * F + 1) * (2 * Jp + 1)) * sixj * cg)


def coupling_coefficient(F, m, Q, Fp, mp, J, Jp, I) -> float:
    """Relative dipole amplitude for (J I) F m -> (J' I) F' m' driven by component Q.

    ``Q`` is the spherical index q in {-1, 0, +1} or one of the names in
    :data:`POLARIZATIONS`. The reduced fine-structure element is set to one, so
    for J' = J + 1 the stretched sigma+ coefficient is exactly 1 and, for fixed
    (F, m), the squares summed over every (Q, F', m') equal (2J'+1)/(2J+1).
    """
    q = POLARIZATIONS[Q] if isinstance(Q, str) else int(Q)
    if q not in Q_VALUES:
        raise DomainError(f"unknown polarization component {Q!r}")
    if abs(Jp - J) > 1 or (J == 0 and Jp == 0):
        raise DomainError(f"J={J} -> J'={Jp} is not dipole allowed")
    if F not in allowed_F(I, J) or Fp not in allowed_F(I, Jp):
        raise DomainError(f"F={F} or F'={Fp} not in the manifolds for I={I}")
    if abs(m) > F + 1e-9 or abs(mp) > Fp + 1e-9:
        raise DomainError(f"|m| exceeds F in ({F}, {m}) -> ({Fp}, {mp})")
    return _raw_coupling(float(J), float(Jp), float(I), float(F), float(m), q, float(Fp), float(mp))


@dataclass(frozen=True)
class FineLevel:
    label: str
    J: float
    lifetime: float | None  # seconds
    A_hfs: float  # MHz
    B_hfs: float  # MHz
    energy_ref: float = 0.0  # Hz
    name: str = ""
    F_subset: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValidationError(f"unknown level label {self.label!r}")
        if not _is_half_integer(self.J) or self.J < 0:
            raise ValidationError(f"J={self.J} must be a non-negative half-integer")
        if self.label != "g" and (self.lifetime is None or self.lifetime <= 0):
            raise ValidationError(f"level {self.label} needs a positive lifetime")

    @property
    def gamma(self) -> float:
        """Coherence decay rate 1/(2 lifetime) in rad/s; zero for a stable level."""
        if self.lifetime is None:
            return 0.0
        return 1.0 / (2.0 * self.lifetime)

    def F_values(self, I: float) -> list[float]:
        full = allowed_F(I, self.J)
        if self.F_subset is None:
            return full
        bad = [F for F in self.F_subset if not any(abs(F - f) < 1e-9 for f in full)]
        if bad:
            raise ValidationError(f"level {self.label}: F={bad} not allowed for J={self.J}, I={I}")
        return sorted(float(F) for F in self.F_subset)


@dataclass(frozen=True)
class HyperfineLevel:
    F: float
    m_F: float
    offset: float  # MHz

    def __post_init__(self):
        if abs(self.m_F) > self.F + 1e-9:
            raise DomainError(f"|m_F|={abs(self.m_F)} exceeds F={self.F}")


def _sublevels(level: FineLevel, I: float) -> tuple[HyperfineLevel, ...]:
    out = []
    for F in level.F_values(I):
        offset = hyperfine_energy(level.A_hfs, level.B_hfs, I, level.J, F)
        out.extend(HyperfineLevel(F, -F + k, offset) for k in range(int(round(2 * F)) + 1))
    return tuple(out)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LevelScheme:
    """Four manifolds with sublevels, coupling tables and ground populations.

    ``tables[t]`` has shape (n_lower, n_upper, 3) with the last axis ordered
    (sigma-, pi, sigma+).
    """

    I: float
    levels: Mapping[str, FineLevel]
    sublevels: Mapping[str, tuple[HyperfineLevel, ...]]
    wavelengths: Mapping[str, float]  # nm
    tables: Mapping[str, np.ndarray]
    ground_population: np.ndarray
    optical_depth: float
    mass: float  # kg
    species: str = ""

    def __post_init__(self):
        total = float(np.sum(self.ground_population))
        if abs(total - 1.0) > 1e-12:
            raise ValidationError(f"ground population sums to {total}, not 1")
        if np.any(self.ground_population < 0):
            raise ValidationError("negative ground population")

    def offsets(self, label: str) -> np.ndarray:
        """Hyperfine offsets (MHz) of every sublevel of a manifold."""
        return np.array([h.offset for h in self.sublevels[label]])

    def index(self, label: str, F: float, m: float) -> int:
        for i, h in enumerate(self.sublevels[label]):
            if abs(h.F - F) < 1e-9 and abs(h.m_F - m) < 1e-9:
                return i
        raise DomainError(f"no sublevel F={F}, m={m} in manifold {label}")

    def coupling(self, transition: str, lower: tuple[float, float], Q, upper: tuple[float, float]) -> float:
        q = POLARIZATIONS[Q] if isinstance(Q, str) else int(Q)
        lo = self.index(transition[0], *lower)
        up = self.index(transition[1], *upper)
        return float(self.tables[transition][lo, up, q + 1])

    def with_ground_population(self, spec) -> "LevelScheme":
        pop = ground_population(spec, self.sublevels["g"])
        return LevelScheme(self.I, self.levels, self.sublevels, self.wavelengths, self.tables,
                           _frozen(pop), self.optical_depth, self.mass, self.species)

    def with_hyperfine_constants(self, label: str, A: float, B: float) -> "LevelScheme":
        """Copy with new A/B constants for one manifold (couplings are unchanged)."""
        old = self.levels[label]
        lvl = FineLevel(old.label, old.J, old.lifetime, A, B, old.energy_ref, old.name, old.F_subset)
        levels = dict(self.levels)
        levels[label] = lvl
        subs = dict(self.sublevels)
        subs[label] = _sublevels(lvl, self.I)
        return LevelScheme(self.I, levels, subs, self.wavelengths, self.tables,
                           self.ground_population, self.optical_depth, self.mass, self.species)


def ground_population(spec, sublevels: Sequence[HyperfineLevel]) -> np.ndarray:
    """Resolve a ground-population spec ("thermal", "stretched" or explicit entries)."""
    n = len(sublevels)
    pop = np.zeros(n)
    if spec == "thermal":
        pop[:] = 1.0 / n
    elif spec == "stretched":
        Fmax = max(h.F for h in sublevels)
        hits = [i for i, h in enumerate(sublevels) if h.F == Fmax and abs(h.m_F - Fmax) < 1e-9]
        pop[hits[0]] = 1.0
    elif isinstance(spec, (list, tuple)):
        for entry in spec:
            try:
                F, m, w = float(entry["F"]), float(entry["m"]), float(entry["weight"])
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"bad ground population entry {entry!r}") from exc
            idx = [i for i, h in enumerate(sublevels) if h.F == F and abs(h.m_F - m) < 1e-9]
            if not idx:
                raise ConfigError(f"ground population refers to missing sublevel F={F}, m={m}")
            pop[idx[0]] += w
        if pop.sum() <= 0:
            raise ConfigError("ground population weights sum to zero")
        pop /= pop.sum()
    else:
        raise ConfigError(f"unknown ground population {spec!r}")
    return pop


def _coupling_table(I, lower: FineLevel, upper: FineLevel, lo_subs, up_subs) -> np.ndarray:
    table = np.zeros((len(lo_subs), len(up_subs), 3))
    for a, h in enumerate(lo_subs):
        for b, hp in enumerate(up_subs):
            q = int(round(hp.m_F - h.m_F))
            if q in Q_VALUES:
                table[a, b, q + 1] = coupling_coefficient(h.F, h.m_F, q, hp.F, hp.m_F, lower.J, upper.J, I)
    return table


def default_species_path() -> Path:
    return Path(str(resources.files("orcamem") / "data" / "rb87.yaml"))


def load_species(path: str | Path | None = None) -> dict:
    path = Path(path) if path is not None else default_species_path()
    if not path.exists():
        raise ConfigError(f"species file not found: {path}")
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"species file {path} is not a mapping")
    return data


_SPECIES_KEYS = {"schema_version", "species", "mass_u", "I", "levels", "wavelengths_nm",
                 "optical_depth", "ground_population"}
_LEVEL_KEYS = {"label", "name", "J", "lifetime_ns", "A_MHz", "B_MHz", "F"}


def build_level_scheme(config: Mapping | str | Path | None = None, **overrides) -> LevelScheme:
    """Build a :class:`LevelScheme` from a species mapping or data-file path.

    Keyword overrides replace top-level keys (e.g. ``ground_population="stretched"``,
    ``optical_depth=...``) or, as ``hfs={"d": (A, B)}``, a manifold's constants.
    """
    data = dict(config) if isinstance(config, Mapping) else load_species(config)
    hfs = overrides.pop("hfs", {})
    data.update(overrides)
    unknown = set(data) - _SPECIES_KEYS
    if unknown:
        raise ConfigError(f"unknown species keys: {sorted(unknown)}")
    try:
        I = float(data["I"])
        raw_levels = data["levels"]
        wl = {k: float(data["wavelengths_nm"][k]) for k in TRANSITIONS}
        od = float(data["optical_depth"])
        mass = float(data["mass_u"]) * AMU
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"species data incomplete: {exc}") from exc

    levels = {}
    for entry in raw_levels:
        extra = set(entry) - _LEVEL_KEYS
        if extra:
            raise ConfigError(f"unknown level keys: {sorted(extra)}")
        label = entry["label"]
        A, B = hfs.get(label, (entry.get("A_MHz", 0.0), entry.get("B_MHz", 0.0)))
        life = entry.get("lifetime_ns")
        levels[label] = FineLevel(
            label=label,
            J=float(entry["J"]),
            lifetime=None if life is None else float(life) * 1e-9,
            A_hfs=float(A),
            B_hfs=float(B),
            name=entry.get("name", ""),
            F_subset=tuple(entry["F"]) if entry.get("F") is not None else None,
        )
    if set(levels) != set(LABELS):
        raise ValidationError(f"need levels {LABELS}, got {sorted(levels)}")
    for t in TRANSITIONS:
        J, Jp = levels[t[0]].J, levels[t[1]].J
        if abs(Jp - J) > 1 or (J == 0 and Jp == 0):
            raise ValidationError(f"no dipole-allowed path {t[0]}->{t[1]} (J={J} -> {Jp})")
    if od < 0:
        raise ValidationError("optical depth must be non-negative")

    subs = {label: _sublevels(levels[label], I) for label in LABELS}
    tables = {t: _frozen(_coupling_table(I, levels[t[0]], levels[t[1]], subs[t[0]], subs[t[1]]))
              for t in TRANSITIONS}
    pop = ground_population(data.get("ground_population", "thermal"), subs["g"])
    return LevelScheme(I, levels, subs, wl, tables, _frozen(pop), od, mass, str(data.get("species", "")))


def reduced_scheme(scheme: LevelScheme) -> LevelScheme:
    """One sublevel per manifold with unit sigma+ couplings and no hyperfine shifts.

    Running the hyperfine tier on this scheme must reproduce the four-level tier.
    """
    subs = {label: (HyperfineLevel(0.0, 0.0, 0.0),) for label in LABELS}
    unit = np.zeros((1, 1, 3))
    unit[0, 0, 2] = 1.0
    tables = {t: _frozen(unit) for t in TRANSITIONS}
    return LevelScheme(scheme.I, scheme.levels, subs, scheme.wavelengths, tables,
                       _frozen(np.ones(1)), scheme.optical_depth, scheme.mass, scheme.species)


@dataclass(frozen=True)
class VelocityGrid:
    velocities: np.ndarray  # m/s
    weights: np.ndarray
    temperature: float  # K
    mass: float  # kg
    sigma_v: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "sigma_v", math.sqrt(K_B * self.temperature / self.mass))

    def __len__(self):
        return len(self.velocities)

    def permuted(self, order) -> "VelocityGrid":
        order = np.asarray(order)
        return VelocityGrid(_frozen(self.velocities[order]), _frozen(self.weights[order]),
                            self.temperature, self.mass)


def velocity_grid(T: float, mass: float, n_classes: int = 101, span: float = 4.0) -> VelocityGrid:
    """Symmetric uniform grid on +-span*sigma_v with renormalized Maxwell-Boltzmann weights."""
    if T <= 0 or mass <= 0:
        raise DomainError("temperature and mass must be positive")
    if n_classes < 1 or n_classes % 2 == 0:
        raise DomainError(f"n_classes={n_classes} must be odd")
    if span <= 0:
        raise DomainError("span must be positive")
    sigma = math.sqrt(K_B * T / mass)
    if n_classes == 1:
        v = np.zeros(1)
    else:
        v = np.linspace(-span * sigma, span * sigma, n_classes)
        v[n_classes // 2] = 0.0
        v = 0.5 * (v - v[::-1])  # exact antisymmetry
    w = np.exp(-0.5 * (v / sigma) ** 2)
    w = 0.5 * (w + w[::-1])
    w /= w.sum()
    return VelocityGrid(_frozen(v), _frozen(w), float(T), float(mass))
