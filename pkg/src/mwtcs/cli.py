"""Command-line entry point: ``mwtcs <subcommand> [options]``.

Configuration comes from an optional JSON file (``--config``) whose top-level
keys are :class:`~mwtcs.tensors_io.RunConfig` fields plus the optional
sections ``phantom``, ``dictionary`` and ``bench``. ``--set key=value``
overrides any entry (dotted keys reach into sections, values are parsed as
JSON when possible) and ``--seed`` overrides the seed; flags always win.

Every subcommand writes into its output directory only and echoes the
effective configuration as ``effective-config.json``. Without ``--out`` the
directory is ``$MWTCS_OUT`` (default ``./mwtcs-out``) joined with the
subcommand name; ``bench`` appends a timestamp.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .bench import TrainingSettings, emit_report, run_benchmark, train_dictionary
from .dictionaries import Dictionary, dct_dictionary, learn_dictionary
from .forward import DiscretisationWarning, SingularSystemError, add_noise, build_greens, build_scene, \
    forward_solve, incident_fields
from .inverse import invert_als_cs, invert_bp, relative_error
from .linear_ops import (
    make_blur_downsample_operator,
    make_fourier_subsample_operator,
    make_mask_operator,
    radial_fraction_set,
    random_mask,
    recover_sparse,
)
from .phantoms import NS_HOLDOUT, NS_PHANTOM, NS_TEST, NS_TRAIN, CirclePhantomSpec, generate_dataset, save_dataset
from .sparse import write_trace_csv
from .tensors_io import (
    ConfigError,
    MatrixFormatError,
    RunConfig,
    config_from_dict,
    read_matrix,
    write_image_pgm,
    write_matrix,
    write_sidecar,
)

ENV_OUT = "MWTCS_OUT"
SECTIONS = ("phantom", "dictionary", "bench")
NAMESPACES = {"phantom": NS_PHANTOM, "train": NS_TRAIN, "test": NS_TEST, "holdout": NS_HOLDOUT}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- configuration ----------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_settings(path=None, overrides=(), seed=None) -> dict:
    """Merge defaults, the config file and flag overrides into one settings dict."""
    raw: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a JSON object")
    raw = copy.deepcopy(raw)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        parts = key.split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "not a section")
        node[parts[-1]] = _parse_value(value)
    if seed is not None:
        raw["seed"] = seed
    sections = {s: raw.pop(s, {}) for s in SECTIONS}
    for s, v in sections.items():
        if not isinstance(v, dict):
            raise ConfigError(s, "section must be an object")
    run = config_from_dict(raw)
    phantom = dict(sections["phantom"])
    phantom.setdefault("grid_pixels_per_side", run.grid_pixels_per_side)
    try:
        spec = CirclePhantomSpec.from_dict(phantom)
        training = TrainingSettings.from_dict(sections["dictionary"])
    except TypeError as exc:
        raise ConfigError("phantom/dictionary", str(exc)) from exc
    bench = {"n_test": 20, **sections["bench"]}
    unknown = sorted(set(bench) - {"n_test"})
    if unknown:
        raise ConfigError(f"bench.{unknown[0]}", "unknown configuration key")
    return {"run": run, "phantom": spec, "dictionary": training, "bench": bench}


def settings_to_dict(settings: dict) -> dict:
    return {
        **settings["run"].to_dict(),
        "phantom": settings["phantom"].to_dict(),
        "dictionary": dict(vars(settings["dictionary"])),
        "bench": settings["bench"],
    }


def _out_dir(args, name: str) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(ENV_OUT, "mwtcs-out"))
    if name == "bench":
        name = f"bench-{time.strftime('%Y%m%d-%H%M%S')}"
    return root / name


def _scene(run: RunConfig):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DiscretisationWarning)
        scene = build_scene(run)
    return scene, build_greens(scene)


def _need_file(path, flag):
    if path is None:
        raise UsageError(f"missing required flag {flag}")
    if not Path(path).is_file():
        raise UsageError(f"{flag}: no such file {path}")
    return path


def _complex_meas(path, scene):
    e = read_matrix(path)
    if e.shape != (scene.n_rec, scene.n_inc):
        raise UsageError(f"measurements have shape {e.shape}, expected {(scene.n_rec, scene.n_inc)}")
    return e.astype(complex)


def _phantom_row(path, index, n_pixels):
    data = read_matrix(path)
    if data.shape[1] == 1 and data.shape[0] == n_pixels:
        data = data.T
    if data.shape[1] != n_pixels:
        raise UsageError(f"phantom rows have {data.shape[1]} pixels, scene has {n_pixels}")
    if not 0 <= index < data.shape[0]:
        raise UsageError(f"--index {index} outside [0, {data.shape[0]})")
    return data[index].real


# -- subcommands ------------------------------------------------------------

def cmd_info(args, settings, out):
    print(f"mwtcs {__version__}")
    print(f"python {platform.python_version()}, numpy {np.__version__}, scipy {scipy.__version__}")
    print(f"default output root: ${ENV_OUT} or ./mwtcs-out")
    print(json.dumps(settings_to_dict(settings), indent=2, sort_keys=True))


def cmd_phantom(args, settings, out):
    spec = settings["phantom"]
    ns = NAMESPACES[args.namespace]
    data = generate_dataset(spec, args.count, settings["run"].seed, namespace=ns)
    save_dataset(out / "phantoms.mtx", data, spec, settings["run"].seed, ns)
    m = spec.grid_pixels_per_side
    hi = spec.epsilon_r_range[1] - 1
    for k in range(min(args.count, args.previews)):
        write_image_pgm(out / f"phantom_{k:03d}.pgm", data[k].reshape(m, m), (0.0, hi))
    print(f"wrote {args.count} phantoms to {out / 'phantoms.mtx'}")


def cmd_dict_dct(args, settings, out):
    d = dct_dictionary(settings["run"].grid_pixels_per_side, args.overcompleteness)
    d.save(out / "dictionary.mtx")
    print(f"wrote {d.atoms.shape[0]}x{d.atoms.shape[1]} DCT dictionary")


def cmd_dict_train(args, settings, out):
    tr = settings["dictionary"]
    seed = settings["run"].seed
    if args.data:
        data = read_matrix(_need_file(args.data, "--data")).real
        res = learn_dictionary(data, tr.j_atoms, tr.lambda_reg, tr.epochs, tr.batch_size, seed,
                               fista_iters=tr.fista_iters)
        res.dictionary.meta.update({"data": str(args.data), "trace": res.trace})
    else:
        res = train_dictionary(settings["phantom"], tr, seed,
                               callback=lambda e, d, obj: print(f"epoch {e + 1}: objective {obj!r}"))
    res.dictionary.save(out / "dictionary.mtx")
    write_trace_csv(out / "trace.csv", res.trace, ("epoch", "objective"))
    print(f"objective trace: {res.trace}")


def cmd_forward(args, settings, out):
    run = settings["run"]
    path = _need_file(args.phantom, "--phantom")
    scene, greens = _scene(run)
    x = _phantom_row(path, args.index, scene.n_pixels)
    if x.min() < 0:
        raise UsageError("contrast must be non-negative")
    e_tot, e_sca = forward_solve(scene, greens, x, e_inc=incident_fields(scene))
    if args.snr_db is not None:
        e_sca = add_noise(e_sca, args.snr_db, np.random.default_rng(run.seed))
    write_matrix(out / "e_scattered.mtx", e_sca)
    if args.save_total:
        write_matrix(out / "e_total.mtx", e_tot)
    print(f"wrote {e_sca.shape[0]}x{e_sca.shape[1]} scattered field")


def cmd_invert(args, settings, out):
    run = settings["run"]
    meas = _need_file(args.measurements, "--measurements")
    scene, greens = _scene(run)
    e_meas = _complex_meas(meas, scene)
    e_inc = incident_fields(scene)
    if args.method == "bp":
        res = invert_bp(scene, greens, e_meas, e_inc)
    else:
        d = Dictionary.load(_need_file(args.dictionary, "--dictionary"))
        if d.n_pixels != scene.n_pixels:
            raise UsageError("dictionary does not match the grid")
        res = invert_als_cs(scene, greens, e_meas, e_inc, d, run)
    m = scene.m
    write_matrix(out / "contrast.mtx", res.contrast_estimate)
    hi = max(settings["phantom"].epsilon_r_range[1] - 1, float(res.contrast_estimate.max()))
    write_image_pgm(out / "contrast.pgm", res.contrast_estimate.reshape(m, m), (0.0, hi))
    fields = ("iteration", "cost", "state_term", "data_term", "l1", "penalised")
    with open(out / "cost_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in res.cost_trace:
            w.writerow([repr(r[k]) if isinstance(r.get(k), float) else r.get(k, "") for k in fields])
    summary = {"method": res.method, "iterations": res.iterations_run, "flags": res.flags}
    if args.truth:
        x = _phantom_row(_need_file(args.truth, "--truth"), args.index, scene.n_pixels)
        summary["relative_error"], summary["sentinel"] = relative_error(res.contrast_estimate, x)
    write_sidecar(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))


def _demo_image(rng, d, k):
    s = np.zeros(d.n_atoms)
    s[rng.choice(d.n_atoms, k, replace=False)] = rng.choice([-1.0, 1.0], k) * rng.uniform(0.5, 2.0, k)
    return d.atoms @ s


def cmd_linear_demo(args, settings, out):
    run = settings["run"]
    m = run.grid_pixels_per_side
    i_dim = m * m
    rng = np.random.default_rng(run.seed)
    d = Dictionary.load(args.dictionary) if args.dictionary else dct_dictionary(m, 1.0)
    x = _phantom_row(args.image, args.index, i_dim) if args.image else _demo_image(rng, d, args.sparsity)
    if args.kind == "inpaint":
        op = make_mask_operator(random_mask(i_dim, args.fraction or 0.5, rng), i_dim)
    elif args.kind == "superres":
        op = make_blur_downsample_operator(args.factor, i_dim)
    elif args.kind == "fourier":
        op = make_fourier_subsample_operator(random_mask(i_dim, args.fraction or 0.3, rng), m)
    else:
        op = make_fourier_subsample_operator(radial_fraction_set(m, args.fraction or 0.3), m)
    y = op.apply(x)
    if args.solver == "omp":
        rec = recover_sparse(op, d, y, "omp", k_max=args.sparsity)
    else:
        rec = recover_sparse(op, d, y, "fista", iters=args.iters, debiased=True)
    lo, hi = float(min(x.min(), rec.image.min())), float(max(x.max(), rec.image.max()))
    hi = hi if hi > lo else lo + 1.0
    # zero-filled (or block-replicated) observation for the "before" picture
    before = op.apply_adjoint(y) * (args.factor**2 if args.kind == "superres" else 1)
    write_matrix(out / "truth.mtx", x)
    write_matrix(out / "measurements.mtx", y)
    write_matrix(out / "recovered.mtx", rec.image)
    write_image_pgm(out / "before.pgm", before.reshape(m, m), (lo, hi))
    write_image_pgm(out / "after.pgm", rec.image.reshape(m, m), (lo, hi))
    err, _ = relative_error(rec.image, x)
    summary = {"kind": args.kind, "solver": args.solver, "n_measurements": int(op.shape[0]),
               "relative_error": err, "support_size": rec.code.sparsity}
    write_sidecar(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))


def cmd_bench(args, settings, out):
    run, spec = settings["run"], settings["phantom"]
    if args.dictionary:
        d = Dictionary.load(_need_file(args.dictionary, "--dictionary"))
    else:
        res = train_dictionary(spec, settings["dictionary"], run.seed,
                               callback=lambda e, d, obj: print(f"epoch {e + 1}: objective {obj!r}"))
        d = res.dictionary
        d.save(out / "dictionary.mtx")
    n_test = args.n_test if args.n_test is not None else int(settings["bench"]["n_test"])
    report = run_benchmark(run, d, n_test, run.seed, spec, threads=args.threads)
    emit_report(report, out)
    agg = report.aggregate
    print(f"bp median {agg['bp']['median']!r}, als_cs median {agg['als_cs']['median']!r}, "
          f"win rate {agg['win_rate']!r} over {agg['n_compared']} phantoms")


COMMANDS = {
    "info": cmd_info,
    "phantom": cmd_phantom,
    "dict-train": cmd_dict_train,
    "dict-dct": cmd_dict_dct,
    "forward": cmd_forward,
    "invert": cmd_invert,
    "linear-demo": cmd_linear_demo,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help=f"output directory (default ${ENV_OUT}/<subcommand>)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=0, help="worker threads, 0 = auto")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (dotted keys for sections); repeatable")

    p = _Parser(prog="mwtcs", description="Microwave tomography with sparse priors")
    p.add_argument("--version", action="version", version=f"mwtcs {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("info", parents=[common], help="version and default configuration")

    s = sub.add_parser("phantom", parents=[common], help="generate random-circle phantoms")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--namespace", choices=sorted(NAMESPACES), default="phantom")
    s.add_argument("--previews", type=int, default=4, help="PGM previews of the first phantoms")

    s = sub.add_parser("dict-dct", parents=[common], help="overcomplete 2-D DCT dictionary")
    s.add_argument("--overcompleteness", type=float, default=4.0)

    s = sub.add_parser("dict-train", parents=[common], help="learn a dictionary")
    s.add_argument("--data", help="MTX1 training set (rows are images); default: generated phantoms")

    s = sub.add_parser("forward", parents=[common], help="simulate scattered fields")
    s.add_argument("--phantom", help="MTX1 phantom file (rows are images)")
    s.add_argument("--index", type=int, default=0, help="row of the phantom file")
    s.add_argument("--snr-db", type=float, help="add complex Gaussian noise at this SNR")
    s.add_argument("--save-total", action="store_true", help="also write the total field")

    s = sub.add_parser("invert", parents=[common], help="reconstruct a contrast map")
    s.add_argument("--method", choices=("bp", "als-cs"), default="als-cs")
    s.add_argument("--measurements", help="complex MTX1 scattered field (N_rec x N_inc)")
    s.add_argument("--dictionary", help="dictionary MTX1 (als-cs)")
    s.add_argument("--truth", help="phantom MTX1 to report the relative error against")
    s.add_argument("--index", type=int, default=0)

    s = sub.add_parser("linear-demo", parents=[common], help="linear compressed-sensing demos")
    s.add_argument("--kind", choices=("inpaint", "superres", "fourier", "radial"), default="inpaint")
    s.add_argument("--fraction", type=float, help="kept fraction (pixels or frequencies)")
    s.add_argument("--factor", type=int, default=2, help="superresolution decimation factor")
    s.add_argument("--solver", choices=("fista", "omp"), default="omp")
    s.add_argument("--sparsity", type=int, default=3)
    s.add_argument("--iters", type=int, default=500)
    s.add_argument("--dictionary", help="dictionary MTX1 (default orthonormal DCT)")
    s.add_argument("--image", help="MTX1 image file instead of a random sparse image")
    s.add_argument("--index", type=int, default=0)

    s = sub.add_parser("bench", parents=[common], help="BP versus ALS-CS benchmark")
    s.add_argument("--dictionary", help="pre-trained dictionary (default: train one)")
    s.add_argument("--n-test", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 0:
        parser.print_usage(sys.stderr)
        print("mwtcs: error: --threads must be >= 0", file=sys.stderr)
        return 1
    args.threads = args.threads or os.cpu_count() or 1
    try:
        settings = load_settings(args.config, args.set, args.seed)
        out = _out_dir(args, args.command)
        if args.command != "info":
            out.mkdir(parents=True, exist_ok=True)
            write_sidecar(out / "effective-config.json", settings_to_dict(settings))
        COMMANDS[args.command](args, settings, out)
    except (UsageError, ConfigError, MatrixFormatError, FileNotFoundError) as exc:
        print(f"mwtcs: error: {exc}", file=sys.stderr)
        return 1
    except (SingularSystemError, RuntimeError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"mwtcs: runtime failure: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"mwtcs: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
