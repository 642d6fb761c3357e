"""Command-line entry points: exact references, sampling runs, analysis.

Configuration is a flat key=value text file with # comments; keys are named
after the ChainConfig and KdeParams fields plus a few list-valued extras.
Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure
(abort budget exceeded or an interrupted run).
"""

from __future__ import annotations

import argparse
import csv
import json
import multiprocessing
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    ANALYSIS_STREAM_KEY,
    DistributionEstimate,
    KdeParams,
    cdf_and_dsup,
    grid_dist,
    histogram_on_grid,
    kde,
    qpe_distortion_model,
    scalar_observable_error,
)
from .circuits import QpeGrid
from .gauge import GaugeModel, HamiltonianSpec
from .qms import ChainConfig, EngineContext, ChainPool, SampleRecord, batch_groups, merge_stats
from .statevector import RngStream

QE_MIN, QE_MAX = 3, 7

CHAIN_KEYS = {
    "beta": float,
    "q_e": int,
    "e_min": float,
    "e_max": float,
    "trotter_steps": int,
    "evolution": str,
    "thermalization": int,
    "rethermalization": int,
    "m_tol": "optional_int",
    "max_revert_iters": int,
    "move_probs": "float_tuple",
    "seed": int,
    "chains": int,
    "samples_per_chain": int,
    "measure_plaquette": bool,
    "plaquette_index": int,
    "inv_g2": float,
    "chains_per_batch": int,
    "gauge_check_every": int,
}
EXTRA_KEYS = {
    "bandwidth": float,
    "block_size": int,
    "resamples": int,
    "scheme": str,
    "kde_points": int,
    "betas": "float_tuple",
    "qe_list": "int_tuple",
    "abort_budget": int,
}
EXTRA_DEFAULTS = {
    "block_size": 100,
    "resamples": 100,
    "scheme": "bootstrap",
    "kde_points": 512,
    "betas": (1e-7, 0.1, 0.5),
    "qe_list": (3, 4, 5, 6, 7),
    "abort_budget": 1000,
}


class ConfigError(Exception):
    pass


def _parse_value(key: str, raw: str, kind):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "optional_int":
            return None if raw.lower() in ("none", "null", "") else int(raw)
        if kind == "float_tuple":
            return tuple(float(p) for p in raw.split(",") if p.strip())
        if kind == "int_tuple":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse value {raw!r}") from exc


def parse_config_file(path) -> dict:
    """Flat key=value file; unknown keys are hard errors."""
    text = Path(path).read_text()
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key in CHAIN_KEYS:
            out[key] = _parse_value(key, raw, CHAIN_KEYS[key])
        elif key in EXTRA_KEYS:
            out[key] = _parse_value(key, raw, EXTRA_KEYS[key])
        else:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
    return out


def load_settings(args) -> tuple:
    """Returns (ChainConfig, extras dict) from file plus flag overrides."""
    values = {}
    if args.config is not None:
        values = parse_config_file(args.config)
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    extras = dict(EXTRA_DEFAULTS)
    for key in EXTRA_KEYS:
        if key in values:
            extras[key] = values.pop(key)
    try:
        config = ChainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not (QE_MIN <= config.q_e <= QE_MAX) and not args.override_qe_limit:
        raise ConfigError(
            f"q_e={config.q_e} outside the supported range {QE_MIN}..{QE_MAX} "
            "(pass --override-qe-limit to force)"
        )
    return config, extras


def _config_snapshot(config: ChainConfig, extras: dict) -> dict:
    snap = {k: getattr(config, k) for k in CHAIN_KEYS}
    snap["move_probs"] = list(snap["move_probs"])
    snap.update({k: (list(v) if isinstance(v, tuple) else v) for k, v in extras.items()})
    return snap


def _write_manifest(out_dir: Path, payload: dict):
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2, default=float) + "\n")


def _manifest_base(command: str, config: ChainConfig, extras: dict, outputs) -> dict:
    return {
        "tool": "d4qms",
        "version": __version__,
        "command": command,
        "status": "running",
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "seed": config.seed,
        "config": _config_snapshot(config, extras),
        "outputs": list(outputs),
    }


# ----- exact -----------------------------------------------------------------


def cmd_exact(args) -> int:
    config, extras = load_settings(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = ["spectrum.csv", "thermal_reference.csv", "distortion_model.csv", "grid_dist.csv"]
    manifest = _manifest_base("exact", config, extras, outputs)
    _write_manifest(out_dir, manifest)

    model = GaugeModel(HamiltonianSpec(config.inv_g2))
    spectrum = model.exact_spectrum
    with open(out_dir / "spectrum.csv", "w") as fh:
        fh.write("# manifest: manifest.json\nlevel,energy,multiplicity\n")
        for k, (e, mu) in enumerate(zip(spectrum.energies, spectrum.multiplicities)):
            fh.write(f"{k},{e:.12g},{mu}\n")

    with open(out_dir / "thermal_reference.csv", "w") as fh:
        fh.write("# manifest: manifest.json\n")
        fh.write("beta,p_minus2,p_zero,p_plus2,trace_mean,reported_mean,thermal_energy\n")
        for beta in extras["betas"]:
            probs = model.plaquette_eigenspace_probs(beta, config.plaquette_index)
            fh.write(
                f"{beta:g},{probs[-2.0]:.6f},{probs[0.0]:.6f},{probs[2.0]:.6f},"
                f"{probs['mean']:.6f},{probs['reported_mean']:.6f},"
                f"{model.thermal_energy(beta):.6f}\n"
            )

    with open(out_dir / "distortion_model.csv", "w") as fh:
        fh.write("# manifest: manifest.json\nq_e,beta,site,energy,mass,h_distorted\n")
        for q_e in extras["qe_list"]:
            grid = QpeGrid(q_e, config.e_min, config.e_max)
            for beta in extras["betas"]:
                est, h_dist = qpe_distortion_model(spectrum, grid, beta)
                for j, (e, mass) in enumerate(zip(est.support, est.values)):
                    fh.write(f"{q_e},{beta:g},{j},{e:.12g},{mass:.10g},{h_dist:.10g}\n")

    with open(out_dir / "grid_dist.csv", "w") as fh:
        fh.write("# manifest: manifest.json\nq_e,beta,grid_dist\n")
        for q_e in extras["qe_list"]:
            grid = QpeGrid(q_e, config.e_min, config.e_max)
            for beta in extras["betas"]:
                fh.write(f"{q_e},{beta:g},{grid_dist(spectrum, grid, beta):.10g}\n")

    manifest["status"] = "complete"
    manifest["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    manifest["physical_dim"] = int(spectrum.multiplicities.sum())
    _write_manifest(out_dir, manifest)
    return 0


# ----- run ---------------------------------------------------------------------


_WORKER_ENGINE = None


def _run_group(group) -> tuple:
    pool = ChainPool(_WORKER_ENGINE, group)
    records = pool.run()
    return [r.to_csv_row() for r in records], pool.stats()


def cmd_run(args) -> int:
    global _WORKER_ENGINE
    config, extras = load_settings(args)
    if config.chains < 1:
        raise ConfigError("run needs at least one chain")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _manifest_base("run", config, extras, ["samples.csv"])
    _write_manifest(out_dir, manifest)

    engine = EngineContext(config)
    _WORKER_ENGINE = engine
    groups = batch_groups(config)
    workers = max(1, args.workers)
    parts = []
    status = "complete"
    failure = None
    try:
        with open(out_dir / "samples.csv", "w") as fh:
            fh.write("# manifest: manifest.json\n")
            fh.write(SampleRecord.CSV_HEADER + "\n")
            if workers == 1 or len(groups) <= 1:
                sections = map(_run_group, groups)
                for rows, stats in sections:
                    fh.write("".join(row + "\n" for row in rows))
                    fh.flush()
                    parts.append(stats)
            else:
                # fork inherits the engine read-only; rows come back in
                # group order so the file is identical for any worker count
                with multiprocessing.Pool(processes=workers) as mp_pool:
                    for rows, stats in mp_pool.imap(_run_group, groups):
                        fh.write("".join(row + "\n" for row in rows))
                        fh.flush()
                        parts.append(stats)
    except KeyboardInterrupt:
        status = "incomplete"
        failure = "interrupted"
    except Exception as exc:
        status = "incomplete"
        failure = f"{type(exc).__name__}: {exc}"

    stats = merge_stats(parts)
    if status == "complete" and stats.get("aborts", 0) > extras["abort_budget"]:
        status = "failed"
        failure = f"aborts {stats['aborts']} exceeded budget {extras['abort_budget']}"
    manifest["status"] = status
    manifest["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    manifest["stats"] = {k: (float(v) if k == "max_gauge_residual" else int(v))
                         for k, v in stats.items()}
    manifest["workers"] = workers
    if failure is not None:
        manifest["failure"] = failure
    _write_manifest(out_dir, manifest)

    if failure is not None:
        print(f"error: {failure}", file=sys.stderr)
        return 3
    return 0


# ----- analyze -------------------------------------------------------------------


def read_samples_csv(path) -> dict:
    """Columns of a sampling CSV as arrays, aborted rows split out."""
    rows = []
    with open(path) as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader, None)
        if header is None:
            raise ConfigError(f"{path}: empty sample file")
        expected = SampleRecord.CSV_HEADER.split(",")
        if header != expected:
            raise ConfigError(f"{path}: unexpected columns {header}")
        for row in reader:
            if row:
                rows.append(row)
    if not rows:
        raise ConfigError(f"{path}: no sample rows")
    aborted = np.array([r[7] == "1" for r in rows])
    return {
        "chain_id": np.array([int(r[0]) for r in rows]),
        "step": np.array([int(r[1]) for r in rows]),
        "energy_index": np.array([int(r[2]) for r in rows]),
        "energy_value": np.array([float(r[3]) for r in rows]),
        "plaquette": np.array([float(r[4]) if r[4] != "" else np.nan for r in rows]),
        "accepted": np.array([r[5] == "1" for r in rows]),
        "revert_iters": np.array([int(r[6]) for r in rows]),
        "aborted": aborted,
    }


def _load_run_manifest(sample_path: Path) -> dict:
    manifest_path = sample_path.parent / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest.json next to {sample_path}")
    return json.loads(manifest_path.read_text())


def cmd_analyze(args) -> int:
    if args.samples is None:
        raise ConfigError("analyze needs a samples CSV (positional argument)")
    sample_path = Path(args.samples)
    if not sample_path.exists():
        raise ConfigError(f"sample file {sample_path} does not exist")
    run_manifest = _load_run_manifest(sample_path)
    run_cfg = run_manifest["config"]
    config, extras = load_settings(args)
    if args.config is not None:
        for key in ("q_e", "e_min", "e_max"):
            if getattr(config, key) != run_cfg[key]:
                raise ConfigError(
                    f"grid mismatch: samples use q_e={run_cfg['q_e']} over "
                    f"[{run_cfg['e_min']}, {run_cfg['e_max']}], config asks "
                    f"q_e={getattr(config, 'q_e')} over [{config.e_min}, {config.e_max}]"
                )
    grid = QpeGrid(int(run_cfg["q_e"]), float(run_cfg["e_min"]), float(run_cfg["e_max"]))
    beta = float(run_cfg["beta"])

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = ["report.json", "histogram.csv", "kde.csv", "cdfs.csv"]
    manifest = _manifest_base("analyze", config, extras, outputs)
    manifest["samples"] = str(sample_path)
    manifest["run_seed"] = run_manifest.get("seed")
    _write_manifest(out_dir, manifest)

    data = read_samples_csv(sample_path)
    good = ~data["aborted"]
    if not good.any():
        raise ConfigError(f"{sample_path}: every row is an abort record")
    energies = data["energy_value"][good]
    chain_ids = data["chain_id"][good]

    model = GaugeModel(HamiltonianSpec(float(run_cfg["inv_g2"])))
    spectrum = model.exact_spectrum
    rng = RngStream(config.seed, (ANALYSIS_STREAM_KEY,))

    hist = histogram_on_grid(energies, grid, chain_ids, extras["block_size"],
                             extras["resamples"], extras["scheme"], rng.spawn(0))
    params = KdeParams.for_grid(grid, extras["block_size"], extras["resamples"],
                                extras["scheme"], extras.get("bandwidth"),
                                extras["kde_points"])
    density = kde(energies, params, chain_ids, rng.spawn(1))
    distorted, h_distorted = qpe_distortion_model(spectrum, grid, beta)
    weights = model.thermal_weights(beta)
    exact_dist = DistributionEstimate(spectrum.energies, weights, None, "mass", "exact")

    _, _, _, d_qms_exact = cdf_and_dsup(hist, exact_dist)
    _, _, _, d_exact_dist = cdf_and_dsup(exact_dist, distorted)
    _, _, _, d_qms_dist = cdf_and_dsup(hist, distorted)

    mean_e, err_e = scalar_observable_error(energies, extras["block_size"],
                                            extras["resamples"], rng.spawn(2),
                                            chain_ids)
    report = {
        "n_samples": int(good.sum()),
        "n_aborts": int(data["aborted"].sum()),
        "acceptance_rate": float(data["accepted"][good].mean()),
        "mean_revert_iters": float(data["revert_iters"][good].mean()),
        "beta": beta,
        "grid": {"q_e": grid.q_e, "e_min": grid.e_min, "e_max": grid.e_max},
        "energy_mean": mean_e,
        "energy_error": err_e,
        "exact_thermal_energy": model.thermal_energy(beta),
        "h_distorted": h_distorted,
        "d_sup": {
            "exact_vs_distorted": d_exact_dist,
            "exact_vs_qms": d_qms_exact,
            "distorted_vs_qms": d_qms_dist,
        },
        "grid_dist": grid_dist(spectrum, grid, beta),
    }
    plaq = data["plaquette"][good]
    has_plaq = ~np.isnan(plaq)
    if has_plaq.any():
        pv = plaq[has_plaq]
        pc = chain_ids[has_plaq]
        probs = {}
        for value in (-2.0, 0.0, 2.0):
            mean, err = scalar_observable_error((pv == value).astype(float),
                                                extras["block_size"], extras["resamples"],
                                                rng.spawn(3), pc)
            probs[f"{value:+g}"] = {"mean": mean, "error": err}
        t_mean, t_err = scalar_observable_error(pv, extras["block_size"],
                                                extras["resamples"], rng.spawn(4), pc)
        exact_probs = model.plaquette_eigenspace_probs(beta, int(run_cfg["plaquette_index"]))
        report["plaquette"] = {
            "probs": probs,
            "trace_mean": t_mean,
            "trace_error": t_err,
            "reported_mean": t_mean / 3.0,
            "exact": {
                "-2": exact_probs[-2.0],
                "+0": exact_probs[0.0],
                "+2": exact_probs[2.0],
                "trace_mean": exact_probs["mean"],
                "reported_mean": exact_probs["reported_mean"],
            },
        }

    (out_dir / "report.json").write_text(json.dumps(report, indent=2, default=float) + "\n")
    with open(out_dir / "histogram.csv", "w") as fh:
        fh.write("# manifest: manifest.json\nenergy,mass,error\n")
        for e, v, err in zip(hist.support, hist.values, hist.errors):
            fh.write(f"{e:.12g},{v:.10g},{err:.10g}\n")
    with open(out_dir / "kde.csv", "w") as fh:
        fh.write("# manifest: manifest.json\nenergy,density,error\n")
        errs = density.errors if density.errors is not None else np.zeros_like(density.values)
        for e, v, err in zip(density.support, density.values, errs):
            fh.write(f"{e:.12g},{v:.10g},{err:.10g}\n")
    with open(out_dir / "cdfs.csv", "w") as fh:
        fh.write("# manifest: manifest.json\nenergy,cdf_qms,cdf_exact,cdf_distorted\n")
        points = np.union1d(np.union1d(hist.support, exact_dist.support), distorted.support)

        def step_cdf(est):
            order = np.argsort(est.support, kind="stable")
            cum = np.cumsum(est.values[order])
            pos = np.searchsorted(est.support[order], points, side="right")
            return np.concatenate([[0.0], cum])[pos]

        for e, a, b, c in zip(points, step_cdf(hist), step_cdf(exact_dist), step_cdf(distorted)):
            fh.write(f"{e:.12g},{a:.10g},{b:.10g},{c:.10g}\n")

    manifest["status"] = "complete"
    manifest["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    _write_manifest(out_dir, manifest)
    return 0


# ----- argument plumbing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="d4qms",
        description="Quantum Metropolis sampling for a D4 gauge theory on a 2x1 lattice",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key=value configuration file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--workers", type=int, default=1, help="parallel chain workers")
        p.add_argument("--override-qe-limit", action="store_true",
                       help="allow q_e outside the supported 3..7 range")

    p_exact = sub.add_parser("exact", help="write exact spectrum and reference tables")
    common(p_exact)
    p_run = sub.add_parser("run", help="run sampling chains and write records")
    common(p_run)
    p_analyze = sub.add_parser("analyze", help="post-process a sampling CSV")
    p_analyze.add_argument("samples", nargs="?", default=None, help="samples.csv from a run")
    common(p_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"exact": cmd_exact, "run": cmd_run, "analyze": cmd_analyze}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
