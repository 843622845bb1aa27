"""BP versus ALS-CS benchmark on held-out random-circle phantoms.

Training phantoms come from the ``NS_TRAIN`` seed stream and test phantoms
from ``NS_TEST``, so the two sets never share a seed. Outputs written by
:func:`emit_report` depend only on the configuration and seed; wall-clock
times go to a separate ``timings.csv``.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .dictionaries import Dictionary, learn_dictionary
from .forward import DiscretisationWarning, build_greens, build_scene, forward_solve, incident_fields
from .inverse import invert_als_cs, invert_bp, relative_error
from .phantoms import NS_TEST, NS_TRAIN, CirclePhantomSpec, derive_seed, generate_dataset, generate_phantom
from .tensors_io import RunConfig, write_image_pgm, write_sidecar

METHODS = ("bp", "als_cs")
CSV_FIELDS = ("phantom_id", "method", "relative_error", "sentinel", "iterations", "status")


@dataclasses.dataclass(frozen=True)
class TrainingSettings:
    """Dictionary-learning settings for the benchmark (desk scale by default)."""

    j_atoms: int = 1024
    n_train: int = 10_000
    lambda_reg: float = 0.1
    epochs: int = 5
    batch_size: int = 512
    fista_iters: int = 30

    @classmethod
    def from_dict(cls, d: dict) -> TrainingSettings:
        known = {f.name for f in dataclasses.fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ValueError(f"unknown dictionary setting {bad[0]!r}")
        return cls(**d)


def train_dictionary(spec: CirclePhantomSpec, settings: TrainingSettings, seed: int,
                     callback=None):
    """Learn a dictionary on ``n_train`` phantoms from the training seed stream."""
    data = generate_dataset(spec, settings.n_train, seed, namespace=NS_TRAIN)
    res = learn_dictionary(data, settings.j_atoms, settings.lambda_reg, settings.epochs,
                           settings.batch_size, seed, fista_iters=settings.fista_iters,
                           callback=callback)
    res.dictionary.meta.update({"phantom_spec": spec.to_dict(), "namespace": NS_TRAIN,
                                "training_seed": seed, "trace": res.trace})
    return res


@dataclasses.dataclass
class BenchmarkReport:
    rows: list[dict]
    aggregate: dict
    config: dict
    images: list[tuple[int, np.ndarray, np.ndarray, np.ndarray]]
    timings: list[dict] = dataclasses.field(default_factory=list)
    half_steps: dict = dataclasses.field(default_factory=dict)  # phantom id -> ALS half-step log


def dictionary_digest(d: Dictionary) -> str:
    return hashlib.sha256(np.ascontiguousarray(d.atoms).tobytes()).hexdigest()


def _scene(config: RunConfig):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DiscretisationWarning)
        scene = build_scene(config)
    return scene, build_greens(scene), incident_fields(scene)


def _run_one(k, x, scene, greens, e_inc, dictionary, config):
    rows, times, est = [], [], {}
    half = []
    try:
        _, e_meas = forward_solve(scene, greens, x, e_inc=e_inc)
    except Exception as exc:  # recorded, not fatal
        for method in METHODS:
            rows.append(_failed(k, method, f"forward: {exc}"))
            est[method] = np.zeros_like(x)
        return rows, times, est, half
    for method in METHODS:
        t0 = time.perf_counter()
        try:
            if method == "bp":
                res = invert_bp(scene, greens, e_meas, e_inc)
            else:
                res = invert_als_cs(scene, greens, e_meas, e_inc, dictionary, config)
                half = res.half_steps
        except Exception as exc:
            rows.append(_failed(k, method, str(exc)))
            est[method] = np.zeros_like(x)
            continue
        times.append({"phantom_id": k, "method": method, "wall_time_s": time.perf_counter() - t0})
        err, sentinel = relative_error(res.contrast_estimate, x)
        status = "ok" if not getattr(res, "flags", None) else "flagged:" + ";".join(res.flags)
        rows.append({"phantom_id": k, "method": method, "relative_error": err,
                     "sentinel": sentinel, "iterations": res.iterations_run, "status": status})
        est[method] = res.contrast_estimate
    return rows, times, est, half


def _failed(k, method, msg):
    return {"phantom_id": k, "method": method, "relative_error": float("nan"),
            "sentinel": False, "iterations": 0, "status": f"failed: {msg}"}


def aggregate_rows(rows: list[dict]) -> dict:
    """Median/mean error per method and the ALS-CS win rate over BP.

    Only phantoms where both methods succeeded with a regular (non-sentinel)
    error are compared; the win rate is 0 when there are none.
    """
    by = {m: {} for m in METHODS}
    for r in rows:
        if r["status"].startswith("failed") or r["sentinel"]:
            continue
        by[r["method"]][r["phantom_id"]] = r["relative_error"]
    out = {}
    for m in METHODS:
        vals = np.array(list(by[m].values()))
        out[m] = {"n": int(vals.size),
                  "median": float(np.median(vals)) if vals.size else None,
                  "mean": float(np.mean(vals)) if vals.size else None}
    both = sorted(set(by["bp"]) & set(by["als_cs"]))
    wins = sum(by["als_cs"][k] < by["bp"][k] for k in both)
    out["n_compared"] = len(both)
    out["wins"] = int(wins)
    out["win_rate"] = wins / len(both) if both else 0.0
    out["n_failed"] = sum(r["status"].startswith("failed") for r in rows)
    out["n_sentinel"] = sum(bool(r["sentinel"]) for r in rows)
    out["note"] = "thresholds are artifact-defined; relative error is ||x_hat - x|| / ||x||"
    return out


def run_benchmark(config: RunConfig, dictionary: Dictionary, n_test: int, seed: int,
                  phantom_spec: CirclePhantomSpec | None = None, *, phantoms=None,
                  threads: int = 1) -> BenchmarkReport:
    """Simulate noiseless data for ``n_test`` held-out phantoms and run both inverters.

    Phantom ``k`` is drawn with ``derive_seed(seed, k, NS_TEST)`` unless
    explicit ``phantoms`` (``n_test x I``) are given. Per-phantom work can run
    on ``threads`` worker threads; results are assembled in phantom order so
    the report does not depend on scheduling.
    """
    spec = phantom_spec or CirclePhantomSpec(grid_pixels_per_side=config.grid_pixels_per_side)
    if spec.grid_pixels_per_side != config.grid_pixels_per_side:
        raise ValueError("phantom grid and run config disagree")
    if dictionary.n_pixels != spec.n_pixels:
        raise ValueError("dictionary does not match the phantom grid")
    if dictionary.meta.get("namespace", NS_TRAIN) == NS_TEST:
        raise ValueError("dictionary was trained on the test seed stream")
    explicit = phantoms is not None
    if not explicit:
        phantoms = [generate_phantom(spec, derive_seed(seed, k, NS_TEST)) for k in range(n_test)]
    phantoms = [np.asarray(p, dtype=float) for p in phantoms]
    scene, greens, e_inc = _scene(config)

    def job(k):
        return _run_one(k, phantoms[k], scene, greens, e_inc, dictionary, config)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(job, range(len(phantoms))))
    else:
        results = [job(k) for k in range(len(phantoms))]

    rows, timings, images, half = [], [], [], {}
    for k, (r, t, est, h) in enumerate(results):
        rows += r
        timings += t
        images.append((k, phantoms[k], est["bp"], est["als_cs"]))
        half[k] = h
    snapshot = {
        "run_config": config.to_dict(),
        "phantom_spec": spec.to_dict(),
        "seed": seed,
        "n_test": len(phantoms),
        "test_namespace": NS_TEST,
        "explicit_phantoms": explicit,
        "dictionary": {"provenance": dictionary.provenance, "shape": list(dictionary.atoms.shape),
                       "sha256": dictionary_digest(dictionary),
                       "meta": {k: v for k, v in dictionary.meta.items() if k != "trace"}},
    }
    return BenchmarkReport(rows, aggregate_rows(rows), snapshot, images, timings, half)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(report: BenchmarkReport, out_dir) -> list[Path]:
    """Write ``results.csv``, ``aggregate.json``, ``rerun.json``, triptych PGMs and timings.

    Triptychs are ``truth | bp | als_cs`` side by side with a one-pixel
    separator, all on the grey scale ``[0, max contrast of the phantom spec]``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in report.rows:
            w.writerow([_fmt(r[f]) for f in CSV_FIELDS])
    written.append(out / "results.csv")
    for name, payload in (("aggregate.json", report.aggregate), ("rerun.json", report.config)):
        write_sidecar(out / name, payload)
        written.append(out / name)
    spec = report.config.get("phantom_spec", {})
    hi = float(spec.get("epsilon_r_range", [1.5, 2.0])[1]) - 1.0
    for k, truth, bp, als in report.images:
        m = int(round(np.sqrt(truth.size)))
        sep = np.full((m, 1), hi)
        tri = np.hstack([truth.reshape(m, m), sep, bp.reshape(m, m), sep, als.reshape(m, m)])
        path = out / f"triptych_{k:03d}.pgm"
        write_image_pgm(path, tri, (0.0, hi))
        written.append(path)
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("phantom_id", "method", "wall_time_s"))
        for t in report.timings:
            w.writerow([t["phantom_id"], t["method"], f"{t['wall_time_s']:.6f}"])
    return written


def load_rerun(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
