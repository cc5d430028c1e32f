"""Efficiency extraction and the fitting procedures applied to memory data.

Bootstrap uncertainties are parametric: every replica redraws each data point
from a normal law with its stated sigma and refits. Replica ``i`` draws from
``numpy.random.default_rng([seed, i])``, so results do not depend on how
replicas are scheduled over workers.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.optimize import least_squares, minimize

from .errors import ConfigError, DomainError, FitError

TRACE_COLUMNS = ("t_storage_ns", "efficiency", "sigma")
_EFF_SLACK = 1e-9


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class EfficiencyTrace:
    times: tuple  # ns, strictly increasing
    efficiencies: tuple
    sigmas: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        e = np.asarray(self.efficiencies, dtype=float)
        s = np.asarray(self.sigmas, dtype=float)
        if not (t.shape == e.shape == s.shape) or t.ndim != 1:
            raise DomainError("times, efficiencies and sigmas must be equal-length 1-D sequences")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise DomainError("storage times must be strictly increasing")
        if np.any(e < -_EFF_SLACK) or np.any(e > 1 + _EFF_SLACK):
            raise DomainError("efficiencies must lie in [0, 1]")
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise DomainError("uncertainties must be finite and non-negative")
        object.__setattr__(self, "times", tuple(map(float, t)))
        object.__setattr__(self, "efficiencies", tuple(map(float, e)))
        object.__setattr__(self, "sigmas", tuple(map(float, s)))

    @classmethod
    def from_arrays(cls, times, efficiencies, sigmas=None, **meta) -> "EfficiencyTrace":
        sig = np.zeros(len(times)) if sigmas is None else sigmas
        return cls(tuple(times), tuple(efficiencies), tuple(sig), dict(meta))

    def arrays(self):
        return np.array(self.times), np.array(self.efficiencies), np.array(self.sigmas)

    def normalized(self, reference: float | None = None) -> "EfficiencyTrace":
        """Divide by ``reference`` (default: the value at the shortest time)."""
        t, e, s = self.arrays()
        ref = e[0] if reference is None else reference
        if not ref > 0:
            raise DomainError("normalization reference must be positive")
        # normalized traces may exceed 1 (beating maxima), so skip the [0, 1] check
        out = object.__new__(EfficiencyTrace)
        object.__setattr__(out, "times", tuple(map(float, t)))
        object.__setattr__(out, "efficiencies", tuple(map(float, e / ref)))
        object.__setattr__(out, "sigmas", tuple(map(float, s / ref)))
        object.__setattr__(out, "meta", {**self.meta, "normalized_by": float(ref)})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in zip(self.times, self.efficiencies, self.sigmas):
            w.writerow([repr(x) for x in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, **meta) -> "EfficiencyTrace":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise ConfigError("empty trace file")
        header = [h.strip() for h in rows[0]]
        if header[:2] != list(TRACE_COLUMNS[:2]):
            raise ConfigError(f"trace CSV must start with columns {TRACE_COLUMNS}, got {header}")
        t, e, s = [], [], []
        for n, row in enumerate(rows[1:], start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                t.append(float(row[0]))
                e.append(float(row[1]))
                s.append(float(row[2]) if len(row) > 2 and row[2].strip() else 0.0)
            except (ValueError, IndexError):
                raise ConfigError(f"malformed trace row {n}: {row}") from None
        try:
            return cls(tuple(t), tuple(e), tuple(s), dict(meta))
        except DomainError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class FitResult:
    model: str
    params: dict
    uncertainties: dict
    residual_norm: float
    n_boot: int
    seed: int
    derived: dict = field(default_factory=dict)
    derived_uncertainties: dict = field(default_factory=dict)
    intervals: dict = field(default_factory=dict)  # 95% percentile intervals

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ResidualGrid:
    A: np.ndarray
    B: np.ndarray
    S: np.ndarray  # (len(A), len(B)); NaN marks failed nodes
    minimum: tuple  # interpolated (A*, B*)
    minimum_value: float
    best_node: tuple
    uncertainty: tuple = (0.0, 0.0)
    flags: list = field(default_factory=list)
    failed_nodes: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "A_MHz": list(map(float, self.A)),
            "B_MHz": list(map(float, self.B)),
            "residuals": [[None if not np.isfinite(x) else float(x) for x in row] for row in self.S],
            "minimum": list(map(float, self.minimum)),
            "minimum_value": float(self.minimum_value),
            "best_node": list(map(float, self.best_node)),
            "uncertainty": list(map(float, self.uncertainty)),
            "flags": list(self.flags),
            "failed_nodes": [list(map(float, n)) for n in self.failed_nodes],
            "meta": self.meta,
        }


# ---------------------------------------------------------------------------
# windows


def window_efficiency(record, window, reference: float | None = None) -> float:
    """Energy of the output field inside ``window`` divided by ``reference``.

    ``reference`` defaults to the total input-signal energy of the record.
    """
    ref = record.energy(which="in") if reference is None else reference
    if not ref > 0:
        raise DomainError("reference energy must be positive")
    lo, hi = window
    if hi <= lo:
        raise DomainError("window must have positive width")
    if hi <= record.tau[0] or lo > record.tau[-1]:
        warnings.warn(f"window {window} does not overlap the record", stacklevel=2)
        return 0.0
    return record.energy((lo, hi)) / ref


def mode_weights(record, windows) -> np.ndarray:
    """Windowed output energies normalized to the first window."""
    if len(windows) == 0:
        raise DomainError("need at least one window")
    energies = np.array([record.energy(tuple(w)) for w in windows])
    if not energies[0] > 0:
        raise DomainError("first window holds no energy")
    return energies / energies[0]


# ---------------------------------------------------------------------------
# generic weighted least squares + parametric bootstrap


def _weights(sig):
    sig = np.asarray(sig, dtype=float)
    if np.all(sig == 0):
        return np.ones_like(sig)
    positive = sig[sig > 0]
    floor = positive.min() if positive.size else 1.0
    return 1.0 / np.where(sig > 0, sig, floor)


def _lsq(fun, p0, x, y, w, tol=1e-15):
    def res(p):
        return (fun(x, p) - y) * w

    return least_squares(res, p0, method="lm", xtol=tol, ftol=tol, gtol=tol, max_nfev=20000)


def _replica_data(y, sig, seed, i):
    rng = np.random.default_rng([seed, i])
    return y + sig * rng.standard_normal(len(y))


def _bootstrap(refit, y, sig, seed, n_boot, workers):
    """Run ``refit(y_replica)`` over replicas; returns stacked results, failures skipped."""
    replicas = [_replica_data(y, sig, seed, i) for i in range(n_boot)]
    if workers and workers > 1 and n_boot > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(refit, replicas, chunksize=max(1, n_boot // (4 * workers))))
    else:
        out = [refit(r) for r in replicas]
    good = [o for o in out if o is not None]
    return np.array(good) if good else np.empty((0,))


def _summary(samples, names):
    if samples.size == 0:
        return {n: 0.0 for n in names}, {n: (math.nan, math.nan) for n in names}
    sd = samples.std(axis=0, ddof=1) if len(samples) > 1 else np.zeros(samples.shape[1])
    lo, hi = np.percentile(samples, [2.5, 97.5], axis=0)
    return ({n: float(s) for n, s in zip(names, sd)},
            {n: (float(a), float(b)) for n, a, b in zip(names, lo, hi)})


# ---------------------------------------------------------------------------
# Rabi fit


def rabi_model(E, p):
    eta0, vis, a, phi = p
    return eta0 * (1 - vis * np.cos(a * np.sqrt(np.asarray(E, dtype=float)) + phi) ** 2)


def _canonical_rabi(p):
    eta0, vis, a, phi = map(float, p)
    if a < 0:
        a, phi = -a, -phi
    if vis < 0:
        # eta0 (1 - V cos^2 x) == eta0 (1 - V) [1 + V/(1 - V) cos^2(x + pi/2)]
        eta0, vis, phi = eta0 * (1 - vis), -vis / (1 - vis), phi + math.pi / 2
    return np.array([eta0, vis, a, phi % math.pi])


def _rabi_derived(p):
    """First minimum above zero energy: a*sqrt(E) + phi = n*pi."""
    eta0, vis, a, phi = p
    n = math.ceil(phi / math.pi - 1e-12)
    root = (n * math.pi - phi) / a
    if root <= 0:
        root += math.pi / a
    return root**2, vis


@dataclass(frozen=True)
class _RabiRefit:
    E: np.ndarray
    w: np.ndarray
    p0: np.ndarray

    def __call__(self, y):
        try:
            r = _lsq(rabi_model, self.p0, self.E, y, self.w, tol=1e-10)
        except Exception:
            return None
        if not r.success:
            return None
        p = _canonical_rabi(r.x)
        return np.concatenate([p, _rabi_derived(p)])


def fit_rabi(energies, efficiencies, sigmas=None, seed: int = 0, n_boot: int = 1000,
             workers: int = 1) -> FitResult:
    """Fit eta(E) = eta0 * [1 - V cos^2(a sqrt(E) + phi)] to transfer-energy data.

    Returns the pi-pulse energy (first minimum above E = 0) and the pi-pulse
    fidelity V with parametric-bootstrap uncertainties.
    """
    E = np.asarray(energies, dtype=float)
    y = np.asarray(efficiencies, dtype=float)
    sig = np.zeros_like(y) if sigmas is None else np.asarray(sigmas, dtype=float)
    diag = {"n_points": int(len(E))}
    if len(E) < 4 or len(y) != len(E) or len(sig) != len(E):
        raise FitError("Rabi fit needs at least 4 (energy, efficiency, sigma) points", diag)
    if np.any(E < 0):
        raise FitError("pulse energies must be non-negative", diag)
    if np.ptp(y) == 0:
        raise FitError("efficiencies are all equal: no oscillation to fit", diag)
    w = _weights(sig)
    root_span = np.sqrt(E.max()) - np.sqrt(E.min())
    if root_span <= 0:
        raise FitError("all pulse energies are equal", diag)

    best = None
    for phi0 in (0.0, math.pi / 2, math.pi, 3 * math.pi / 2):
        for cycles in (0.25, 0.5, 1.0, 1.5, 2.0):
            a0 = cycles * math.pi / root_span
            p0 = np.array([y.max(), max(1 - y.min() / y.max(), 0.1) if y.max() > 0 else 0.5, a0, phi0])
            try:
                r = _lsq(rabi_model, p0, E, y, w)
            except Exception:
                continue
            if best is None or r.cost < best.cost - 1e-18:
                best = r
    if best is None or not best.success:
        raise FitError("Rabi fit did not converge", diag)
    p = _canonical_rabi(best.x)
    diag.update(params=p.tolist(), cost=float(best.cost))
    if p[2] * root_span < math.pi / 2 - 1e-9:
        raise FitError("data span less than half a Rabi period", diag)
    if abs(p[1]) < 1e-9:
        raise FitError("fitted visibility vanishes: no oscillation", diag)
    e_pi, fid = _rabi_derived(p)

    names = ["eta0", "visibility", "a", "phi", "pi_energy", "pi_fidelity"]
    samples = _bootstrap(_RabiRefit(E, w, p), y, sig, seed, n_boot, workers)
    sd, iv = _summary(samples.reshape(-1, 6) if samples.size else samples, names)
    return FitResult(
        model="rabi-cos2",
        params=dict(zip(names[:4], map(float, p))),
        uncertainties={n: sd[n] for n in names[:4]},
        residual_norm=float(np.sqrt(2 * best.cost)),
        n_boot=int(len(samples)) if samples.size else 0,
        seed=int(seed),
        derived={"pi_energy": float(e_pi), "pi_fidelity": float(fid)},
        derived_uncertainties={"pi_energy": sd["pi_energy"], "pi_fidelity": sd["pi_fidelity"]},
        intervals=iv,
    )


# ---------------------------------------------------------------------------
# lifetime fit


def _gauss_model(t, p):
    return p[0] * np.exp(-((np.asarray(t) / p[1]) ** 2))


def _exp_model(t, p):
    return p[0] * np.exp(-np.asarray(t) / p[1])


LIFETIME_MODELS = {"gaussian": _gauss_model, "exponential": _exp_model}


@dataclass(frozen=True)
class _LifetimeRefit:
    model: str
    t: np.ndarray
    w: np.ndarray
    p0: np.ndarray

    def __call__(self, y):
        try:
            r = _lsq(LIFETIME_MODELS[self.model], self.p0, self.t, y, self.w, tol=1e-10)
        except Exception:
            return None
        return np.array([r.x[0], abs(r.x[1])]) if r.success else None


def fit_lifetime(trace: EfficiencyTrace, model: str = "exponential", seed: int = 0,
                 n_boot: int = 1000, workers: int = 1) -> FitResult:
    """Fit eta0*exp(-(t/t_c)^2) (``gaussian``) or eta0*exp(-t/t_c) (``exponential``)."""
    if model not in LIFETIME_MODELS:
        raise ConfigError(f"unknown lifetime model {model!r}; choose from {sorted(LIFETIME_MODELS)}")
    t, y, sig = trace.arrays()
    diag = {"n_points": int(len(t)), "model": model}
    if len(t) < 3:
        raise FitError("lifetime fit needs at least 3 points", diag)
    if np.all(y <= 0):
        raise FitError("no positive efficiencies", diag)
    w = _weights(sig)
    fun = LIFETIME_MODELS[model]
    # log-linear start
    pos = y > 0
    span = t[pos].max() - t[pos].min() if pos.sum() > 1 else max(t.max(), 1.0)
    tc0 = span if span > 0 else 1.0
    if pos.sum() >= 2:
        x = t[pos] ** 2 if model == "gaussian" else t[pos]
        slope = np.polyfit(x, np.log(y[pos]), 1)[0]
        if slope < 0:
            tc0 = math.sqrt(-1 / slope) if model == "gaussian" else -1 / slope
    best = None
    for scale in (1.0, 0.5, 2.0):
        p0 = np.array([y.max() * 1.0, tc0 * scale])
        try:
            r = _lsq(fun, p0, t, y, w)
        except Exception:
            continue
        if best is None or r.cost < best.cost:
            best = r
    if best is None or not best.success or not np.all(np.isfinite(best.x)):
        raise FitError("lifetime fit did not converge", diag)
    p = np.array([best.x[0], abs(best.x[1])])
    names = ["eta0", "t_c"]
    samples = _bootstrap(_LifetimeRefit(model, t, w, p), y, sig, seed, n_boot, workers)
    sd, iv = _summary(samples.reshape(-1, 2) if samples.size else samples, names)
    return FitResult(
        model=model,
        params={"eta0": float(p[0]), "t_c": float(p[1])},
        uncertainties=sd,
        residual_norm=float(np.sqrt(2 * best.cost)),
        n_boot=int(len(samples)) if samples.size else 0,
        seed=int(seed),
        intervals=iv,
    )


# ---------------------------------------------------------------------------
# hyperfine-constant grid search


def _surface_minimum(A, B, S, start):
    """Interpolated minimum of S within two nodes of the grid node ``start``.

    Limiting the search box keeps interpolant undershoot far from the best node
    from pulling the minimum to the hull edge; shallow valleys still fit inside.
    """
    kx, ky = min(3, len(A) - 1), min(3, len(B) - 1)
    # rescale so the optimizer's absolute gradient tolerance is meaningful
    scale = float(np.ptp(S)) or 1.0
    spline = RectBivariateSpline(A, B, (S - S.min()) / scale, kx=kx, ky=ky)

    def f(x):
        return float(spline(x[0], x[1], grid=False))

    def g(x):
        return np.array([float(spline(x[0], x[1], dx=1, grid=False)),
                         float(spline(x[0], x[1], dy=1, grid=False))])

    r = minimize(f, np.asarray(start, dtype=float), jac=g, method="L-BFGS-B",
                 bounds=[_neighbours(A, start[0]), _neighbours(B, start[1])], options={"gtol": 1e-10, "ftol": 1e-14})
    x = r.x if r.success or np.isfinite(r.fun) else np.asarray(start)
    return (float(x[0]), float(x[1])), float(S.min() + scale * f(x))


def _neighbours(axis, value, reach=2):
    i = int(np.argmin(np.abs(axis - value)))
    return float(axis[max(i - reach, 0)]), float(axis[min(i + reach, len(axis) - 1)])


def _best_node(A, B, S):
    """Lowest residual; ties go to smaller |A|, then smaller |B|."""
    finite = np.isfinite(S)
    smin = np.min(S[finite])
    tol = 1e-12 * max(1.0, abs(smin))
    cands = [(abs(A[i]), abs(B[j]), i, j) for i, j in zip(*np.nonzero(finite & (S <= smin + tol)))]
    _, _, i, j = min(cands)
    return i, j


def _evaluate_node(args):
    evaluate, A, B, times = args
    try:
        out = np.asarray(evaluate(A, B, times), dtype=float)
        if out.shape != (len(times),) or not np.all(np.isfinite(out)):
            raise ValueError("evaluator returned a malformed trace")
        return out, None
    except Exception as exc:  # node failure is data, not a crash
        return None, f"{type(exc).__name__}: {exc}"


def hyperfine_grid_search(data: EfficiencyTrace, A_values, B_values, evaluate, seed: int = 0,
                          n_resample: int = 200, workers: int = 1, max_failed: float = 0.2
                          ) -> ResidualGrid:
    """Least-squares search for the shelving-manifold hyperfine constants.

    ``evaluate(A, B, times)`` returns simulated efficiencies at ``times`` in the
    same normalization as ``data``. Each resample redraws the data from its
    uncertainties, recomputes the residual surface and locates the
    interpolated minimum; their spread is the reported uncertainty.
    """
    A = np.asarray(sorted(A_values), dtype=float)
    B = np.asarray(sorted(B_values), dtype=float)
    if len(A) < 3 or len(B) < 3:
        raise ConfigError("grid search needs at least 3 values per axis")
    t, y, sig = data.arrays()
    nodes = [(a, b) for a in A for b in B]
    jobs = [(evaluate, a, b, t) for a, b in nodes]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_evaluate_node, jobs))
        # evaluators that cannot be pickled fall back to serial mode via exceptions
    else:
        results = [_evaluate_node(j) for j in jobs]

    sims = np.full((len(A), len(B), len(t)), np.nan)
    failed = []
    for (a, b), (out, err) in zip(nodes, results):
        i, j = int(np.searchsorted(A, a)), int(np.searchsorted(B, b))
        if out is None:
            failed.append((a, b))
            warnings.warn(f"grid node A={a}, B={b} failed: {err}", stacklevel=2)
        else:
            sims[i, j] = out
    if len(failed) > max_failed * len(nodes):
        raise FitError(f"{len(failed)} of {len(nodes)} grid nodes failed",
                       {"failed_nodes": failed})

    def surface(yy):
        return np.sum((sims - yy) ** 2, axis=2)

    S = surface(y)
    flags = []
    finite = np.isfinite(S)
    filled = np.where(finite, S, np.nanmax(S))  # failed nodes never attract the minimum
    if np.ptp(y) == 0 or np.ptp(S[finite]) <= 1e-12 * max(1.0, float(np.max(np.abs(S[finite])))):
        flags.append("flat surface")
    if failed:
        flags.append("failed nodes")
    i, j = _best_node(A, B, S)
    best = (float(A[i]), float(B[j]))
    if "flat surface" in flags:
        minimum, minval = best, float(S[i, j])
    else:
        minimum, minval = _surface_minimum(A, B, filled, best)

    spread = (0.0, 0.0)
    if n_resample > 0 and np.any(sig > 0) and "flat surface" not in flags:
        mins = []
        for r in range(n_resample):
            Sr = surface(_replica_data(y, sig, seed, r))
            Sr = np.where(finite, Sr, np.nanmax(Sr))
            ir, jr = _best_node(A, B, Sr)
            mins.append(_surface_minimum(A, B, Sr, (A[ir], B[jr]))[0])
        mins = np.array(mins)
        spread = (float(mins[:, 0].std(ddof=1)), float(mins[:, 1].std(ddof=1)))
    return ResidualGrid(A, B, np.where(finite, S, np.nan), minimum, minval, best, spread, flags,
                        failed, {"seed": int(seed), "n_resample": int(n_resample)})
