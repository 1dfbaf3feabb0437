"""Command-line entry points.

Subcommands: ``simulate`` (one run), ``sweep`` (a batch of runs plus a
manifest), ``cluster`` (PCA plus k-means or affinity propagation over a
manifest's images), ``train`` (GP classifier on labeled compositions),
and ``predict-map`` (dense composition-to-label map from a trained
model).

Exit code 0 covers every successfully executed command, including runs
whose scientific outcome is divergence; nonzero exits are reserved for
operational problems (missing files, malformed configs, bad flags), and
the diagnostics name the failing field.  Every invocation writes
``config_resolved.json`` with the effective parameter values next to its
outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gpc as gpcmod
from . import labels as labelsmod
from . import mlkit
from .energetics import BlendParams
from .grid import GridSpec
from .solver import (
    ConfigError, SimConfig, run, write_gibbs_csv, write_snapshot,
)
from .sweep import SweepSpec, read_manifest, render_rgb, run_sweep, save_png

log = logging.getLogger("blendmorph")


class CliError(Exception):
    """Operational failure; the message names the offending field."""


# ---------------------------------------------------------------------------
# config parsing

_GRID_KEYS = {"nx", "ny", "lx", "ly"}
_PARAM_KEYS = {"chi_ab", "chi_ac", "chi_bc", "n_a", "n_b", "n_c",
               "r_g", "d_p", "d_ab"}
_SIM_KEYS = {"grid", "params", "a0", "b0", "t_end", "dt", "noise_amp",
             "rng_seed", "snapshot_every", "newton_tol", "newton_max_iter",
             "picard_damping", "lin_tol"}
_SWEEP_KEYS = {"a0_values", "b0_values", "chi_cases", "base", "parallelism"}


def _check_keys(d: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise CliError(f"unknown config field {where}{unknown[0]}")


def _sim_config(d: dict, where: str = "") -> SimConfig:
    """Build a SimConfig from a config dict, defaults filling the gaps."""
    if not isinstance(d, dict):
        raise CliError(f"config section {where or '<root>'} must be an object")
    _check_keys(d, _SIM_KEYS, where)
    grid_d = d.get("grid", {})
    _check_keys(grid_d, _GRID_KEYS, where + "grid.")
    param_d = d.get("params", {})
    _check_keys(param_d, _PARAM_KEYS, where + "params.")
    try:
        grid = GridSpec(
            nx=int(grid_d.get("nx", 64)), ny=int(grid_d.get("ny", 64)),
            lx=float(grid_d.get("lx", 3.0)), ly=float(grid_d.get("ly", 3.0)),
        )
        params = BlendParams(
            chi_ab=float(param_d.get("chi_ab", 0.009)),
            chi_ac=float(param_d.get("chi_ac", 0.009)),
            chi_bc=float(param_d.get("chi_bc", 0.009)),
            **{k: float(param_d[k]) for k in
               ("n_a", "n_b", "n_c", "r_g", "d_p", "d_ab") if k in param_d},
        )
        return SimConfig(
            grid=grid, params=params,
            a0=float(d.get("a0", 1.0 / 3.0)), b0=float(d.get("b0", 1.0 / 3.0)),
            t_end=float(d.get("t_end", 50.0)), dt=float(d.get("dt", 0.02)),
            noise_amp=float(d.get("noise_amp", 0.005)),
            rng_seed=int(d.get("rng_seed", 0)),
            snapshot_every=int(d.get("snapshot_every", 0)),
            newton_tol=float(d.get("newton_tol", 1e-9)),
            newton_max_iter=int(d.get("newton_max_iter", 200)),
            picard_damping=float(d.get("picard_damping", 0.5)),
            lin_tol=float(d.get("lin_tol", 1e-10)),
        )
    except (TypeError, ValueError) as err:
        raise CliError(f"invalid value under {where or '<root>'}: {err}")


def _sim_dict(cfg: SimConfig) -> dict:
    p = cfg.params
    return {
        "grid": {"nx": cfg.grid.nx, "ny": cfg.grid.ny,
                 "lx": cfg.grid.lx, "ly": cfg.grid.ly},
        "params": {"chi_ab": p.chi_ab, "chi_ac": p.chi_ac, "chi_bc": p.chi_bc,
                   "n_a": p.n_a, "n_b": p.n_b, "n_c": p.n_c,
                   "r_g": p.r_g, "d_p": p.d_p, "d_ab": p.d_ab},
        "a0": cfg.a0, "b0": cfg.b0, "t_end": cfg.t_end, "dt": cfg.dt,
        "noise_amp": cfg.noise_amp, "rng_seed": cfg.rng_seed,
        "snapshot_every": cfg.snapshot_every, "newton_tol": cfg.newton_tol,
        "newton_max_iter": cfg.newton_max_iter,
        "picard_damping": cfg.picard_damping, "lin_tol": cfg.lin_tol,
    }


def _load_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise CliError(f"{p}: invalid JSON ({err})")


def _write_resolved(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_resolved.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


def _parse_range(text: str, name: str, cast):
    parts = text.split(":")
    if len(parts) != 2:
        raise CliError(f"{name} must look like lo:hi, got {text!r}")
    try:
        return cast(parts[0]), cast(parts[1])
    except ValueError:
        raise CliError(f"{name} must hold {cast.__name__} values, got {text!r}")


# ---------------------------------------------------------------------------
# subcommands

def _cmd_simulate(args) -> int:
    cfg_dict = _load_json(args.config) if args.config else {}
    cfg = _sim_config(cfg_dict)
    if args.seed is not None:
        cfg = replace(cfg, rng_seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(out, {"command": "simulate", **_sim_dict(cfg)})
    res = run(cfg)
    write_snapshot(out / "final.chsnap", res.fields)
    save_png(render_rgb(res.fields), out / "final.png")
    write_gibbs_csv(out / "gibbs.csv", res.gibbs_trace)
    for t, fields in res.snapshots[:-1]:
        write_snapshot(out / f"snapshot_t{t:g}.chsnap", fields)
    summary = {
        "state": res.state.value,
        "completed": res.completed,
        "diverged_at": res.diverged_at,
        "gibbs_first": res.gibbs_trace[0][1],
        "gibbs_last": res.gibbs_trace[-1][1],
    }
    (out / "result.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"state={res.state.value} completed={res.completed} "
          f"gibbs {res.gibbs_trace[0][1]:.6e} -> {res.gibbs_trace[-1][1]:.6e}")
    return 0


def _cmd_sweep(args) -> int:
    if not args.config:
        raise CliError("sweep requires --config with the sweep definition")
    d = _load_json(args.config)
    _check_keys(d, _SWEEP_KEYS, "")
    for key in ("a0_values", "b0_values", "chi_cases"):
        if key not in d:
            raise CliError(f"missing config field {key}")
    base = _sim_config(d.get("base", {}), "base.")
    if args.seed is not None:
        base = replace(base, rng_seed=args.seed)
    out = Path(args.out)
    try:
        spec = SweepSpec(
            a0_values=tuple(d["a0_values"]), b0_values=tuple(d["b0_values"]),
            chi_cases=tuple(tuple(c) for c in d["chi_cases"]),
            base=base, out_dir=str(out),
            parallelism=int(d.get("parallelism", 1)),
        )
    except (TypeError, ValueError) as err:
        raise CliError(f"invalid sweep config: {err}")
    _write_resolved(out, {
        "command": "sweep", "a0_values": list(spec.a0_values),
        "b0_values": list(spec.b0_values),
        "chi_cases": [list(c) for c in spec.chi_cases],
        "parallelism": spec.parallelism, "base": _sim_dict(base),
    })
    records = run_sweep(spec)
    tally = Counter(r.state_id for r in records)
    parts = [f"{s}={tally.get(s, 0)}"
             for s in ("State1", "State2", "State3a", "State3b", "error")]
    print(" ".join(parts))
    print(f"manifest: {out / 'manifest.csv'} ({len(records)} runs)")
    return 0


def _scatter_png(path, scores: np.ndarray, labels: list) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    for name in sorted(set(labels)):
        sel = np.array([l == name for l in labels])
        pc2 = scores[sel, 1] if scores.shape[1] > 1 else np.zeros(sel.sum())
        ax.scatter(scores[sel, 0], pc2, s=36, label=name)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Date": None})
    plt.close(fig)


def _cmd_cluster(args) -> int:
    try:
        ds = mlkit.load_dataset(args.manifest)
    except (FileNotFoundError, ValueError) as err:
        raise CliError(str(err))
    n = ds.x.shape[0]
    q = args.q if args.q is not None else min(8, n - 1)
    if n < 2:
        raise CliError(f"clustering needs at least 2 usable runs, found {n}")
    try:
        pca = mlkit.pca_fit(ds.x, q)
    except ValueError as err:
        raise CliError(f"pca: {err}")
    scores = mlkit.pca_transform(pca, ds.x)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    seed = args.seed if args.seed is not None else 0
    if args.method == "pca-kmeans":
        k_min, k_max = _parse_range(args.k_range, "--k-range", int) \
            if args.k_range else (1, min(8, n))
        try:
            elbow = mlkit.elbow_select(scores, k_min, min(k_max, n), seed=seed)
        except ValueError as err:
            raise CliError(f"elbow: {err}")
        result = mlkit.kmeans(scores, elbow.k_star, seed=seed + elbow.k_star)
        wcss_rows = list(zip(elbow.ks, elbow.wcss))
        note = " (flat wcss curve)" if elbow.flat else ""
        print(f"method=pca-kmeans q={q} k={result.k}{note} "
              f"wcss={result.wcss:.6e}")
    else:
        result = mlkit.affinity_propagation(
            scores, preference=args.preference, damping=args.damping)
        wcss_rows = [(result.k, result.wcss)]
        note = "" if result.converged else " (did not converge)"
        print(f"method=affinity q={q} k={result.k}{note} "
              f"wcss={result.wcss:.6e}")

    run_ids = [r.run_id for r in ds.records]
    labelsmod.write_labels_csv(
        out / "labels.csv",
        [(rid, f"c{int(ci)}") for rid, ci in zip(run_ids, result.labels)],
    )
    with open(out / "wcss_vs_k.csv", "w", newline="") as fh:
        fh.write("k,wcss\n")
        for k, w in wcss_rows:
            fh.write(f"{k},{float(w)!r}\n")
    mlkit.save_pca(out / "pca_model.bin", pca)
    _scatter_png(out / "scatter_pc12.png", scores,
                 [f"c{int(ci)}" for ci in result.labels])
    _write_resolved(out, {
        "command": "cluster", "manifest": str(args.manifest),
        "method": args.method, "q": q, "seed": seed,
        "k_range": args.k_range, "preference": args.preference,
        "damping": args.damping,
    })
    return 0


def _cmd_train(args) -> int:
    try:
        records = read_manifest(args.manifest)
        label_map = labelsmod.read_labels_csv(args.labels)
    except (FileNotFoundError, ValueError) as err:
        raise CliError(str(err))
    points = [
        gpcmod.LabeledPoint(r.a0, r.b0, label_map[r.run_id])
        for r in records if r.run_id in label_map
    ]
    if not points:
        raise CliError("no manifest rows match the labels file")
    missing = len(label_map) - len(points)
    if missing:
        log.warning("%d labeled run_ids missing from the manifest", missing)

    seed = args.seed if args.seed is not None else 0
    try:
        train, test = gpcmod.split_points(points, args.test_fraction, seed)
        aug, dropped = gpcmod.augment(train)
        model = gpcmod.gpc_fit(aug, length_scale=args.length_scale)
        accuracy = gpcmod.evaluate(model, test)
    except (ValueError, gpcmod.FitError) as err:
        raise CliError(f"train: {err}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gpcmod.save_gpc(out / "model.gpc", model)
    metrics = {
        "accuracy": accuracy, "classes": list(model.class_ids),
        "n_train_original": len(train), "n_train_augmented": len(aug),
        "n_augment_dropped": dropped, "n_test": len(test),
    }
    (out / "metrics.json").write_text(
        json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    _write_resolved(out, {
        "command": "train", "manifest": str(args.manifest),
        "labels": str(args.labels), "test_fraction": args.test_fraction,
        "length_scale": args.length_scale, "seed": seed,
    })
    print(f"accuracy={accuracy:.4f} (test n={len(test)}, "
          f"classes={len(model.class_ids)})")
    return 0


def _cmd_predict_map(args) -> int:
    model_path = Path(args.model)
    if not model_path.is_file():
        raise CliError(f"model file not found: {model_path}")
    try:
        model = gpcmod.load_gpc(model_path)
    except ValueError as err:
        raise CliError(str(err))
    a0_range = _parse_range(args.a0_range, "--a0-range", float)
    b0_range = _parse_range(args.b0_range, "--b0-range", float)
    res_w, res_h = _parse_range(args.resolution, "--resolution", int)
    if res_w < 2 or res_h < 2:
        raise CliError("--resolution values must be at least 2")
    a_axis, b_axis, label_grid, prob_grid = gpcmod.prediction_map(
        model, a0_range, b0_range, (res_w, res_h))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gpcmod.write_map_csv(out / "map.csv", model, a_axis, b_axis,
                         label_grid, prob_grid)
    gpcmod.write_map_png(out / "map.png", model, label_grid)
    _write_resolved(out, {
        "command": "predict-map", "model": str(args.model),
        "a0_range": list(a0_range), "b0_range": list(b0_range),
        "resolution": [res_w, res_h],
    })
    n_valid = int((label_grid >= 0).sum())
    print(f"map {res_w}x{res_h}: {n_valid} valid points, "
          f"classes={list(model.class_ids)}")
    return 0


# ---------------------------------------------------------------------------
# parser

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, help="override the base RNG seed")
    common.add_argument("--verbose", action="store_true",
                        help="chatty progress logging")

    parser = argparse.ArgumentParser(
        prog="blendmorph",
        description="Ternary blend demixing: simulate, sweep, cluster, "
                    "classify.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common],
                       help="run one simulation")
    p.set_defaults(handler=_cmd_simulate)

    p = sub.add_parser("sweep", parents=[common],
                       help="run a parameter sweep and write a manifest")
    p.set_defaults(handler=_cmd_sweep)

    p = sub.add_parser("cluster", parents=[common],
                       help="cluster the morphology images of a sweep")
    p.add_argument("--manifest", required=True, help="sweep manifest CSV")
    p.add_argument("--method", choices=("pca-kmeans", "affinity"),
                   default="pca-kmeans")
    p.add_argument("--q", type=int, help="number of principal components")
    p.add_argument("--k-range", help="k range for the elbow scan, lo:hi")
    p.add_argument("--preference", type=float,
                   help="affinity propagation self-similarity")
    p.add_argument("--damping", type=float, default=0.5,
                   help="affinity propagation damping in [0.5, 1); "
                        "full-scale datasets ran at 0.9")
    p.set_defaults(handler=_cmd_cluster)

    p = sub.add_parser("train", parents=[common],
                       help="fit the composition -> label classifier")
    p.add_argument("--manifest", required=True, help="sweep manifest CSV")
    p.add_argument("--labels", required=True, help="run_id,label CSV")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--length-scale", type=float, default=1.0)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("predict-map", parents=[common],
                       help="render the label map of a trained model")
    p.add_argument("--model", required=True, help="trained model file")
    p.add_argument("--a0-range", default="0.1:0.8")
    p.add_argument("--b0-range", default="0.1:0.45")
    p.add_argument("--resolution", default="71:36",
                   help="grid points along a0 and b0, na:nb")
    p.set_defaults(handler=_cmd_predict_map)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except (CliError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: missing file: {err.filename}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
