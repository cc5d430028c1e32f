"""On-disk artifacts: JSON manifests, CSV traces and gnuplot two-column files.

Manifests are written with sorted keys and fixed float formatting so that the
same inputs always give the same bytes. Wall-clock information goes into a
``<name>.time.json`` sidecar next to each manifest and never into the
manifest itself.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__

FIELD_COLUMNS = ("tau_ps", "reE", "imE", "Q")


def _plain(obj):
    """Convert numpy scalars/arrays, tuples and complex numbers into JSON types."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, complex):
        return [_plain(obj.real), _plain(obj.imag)]
    if isinstance(obj, (np.complexfloating,)):
        return _plain(complex(obj))
    if isinstance(obj, Path):
        return str(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def fingerprint(obj) -> str:
    """Short content hash of a JSON-serializable object."""
    return hashlib.sha256(json.dumps(_plain(obj), sort_keys=True).encode()).hexdigest()[:16]


def write_manifest(path: str | Path, manifest: dict, volatile: dict | None = None) -> Path:
    """Write ``manifest`` deterministically; ``volatile`` (timings, cache counters) goes to the sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json({"orcamem_version": __version__, **manifest}))
    sidecar = path.with_name(path.stem + ".time.json")
    sidecar.write_text(canonical_json({"written_utc": datetime.now(timezone.utc).isoformat(),
                                       **(volatile or {})}))
    return path


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def field_csv(record, which: str = "out") -> str:
    """One row per (time sample, polarization component)."""
    E = record.E_out if which == "out" else record.E_in
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELD_COLUMNS)
    tau_ps = np.asarray(record.tau) * 1e3
    for n, t in enumerate(tau_ps):
        for q in range(E.shape[1]):
            w.writerow((f"{t:.6f}", f"{E[n, q].real:.12e}", f"{E[n, q].imag:.12e}", q))
    return buf.getvalue()


def field_dat(record) -> str:
    """Gnuplot-ready ``tau_ps  |E_out|^2`` (summed over polarization)."""
    power = np.sum(np.abs(record.E_out) ** 2, axis=1)
    lines = ["# tau_ps intensity_per_ns"]
    lines += [f"{t * 1e3:.6f} {p:.12e}" for t, p in zip(record.tau, power)]
    return "\n".join(lines) + "\n"


def trace_dat(trace) -> str:
    t, y, _ = trace.arrays()
    lines = ["# t_storage_ns efficiency"] + [f"{a:.9g} {b:.12e}" for a, b in zip(t, y)]
    return "\n".join(lines) + "\n"


def record_summary(record, seq) -> dict:
    """Storage efficiency and per-window retrieval efficiencies of a run.

    Storage efficiency is one minus the output energy found within two signal
    FWHM of each input bin, relative to the input energy.
    """
    e_in = record.energy(which="in")
    out = {"input_energy": e_in}
    if not e_in > 0:
        out.update(storage_efficiency=None, retrieval_efficiencies=[])
        return out
    leaked = 0.0
    for ev in seq.of("signal"):
        half = 2 * ev.fwhm * 1e-3
        leaked += record.energy((ev.time - half, ev.time + half))
    out["storage_efficiency"] = 1.0 - leaked / e_in
    out["retrieval_efficiencies"] = [record.energy(tuple(w)) / e_in for w in seq.windows]
    out["windows_ns"] = [list(w) for w in seq.windows]
    return out
