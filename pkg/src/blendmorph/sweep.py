"""Parameter-sweep orchestration, manifests, and morphology images.

A sweep is the Cartesian product of starting compositions and interaction
cases, each executed as an independent seeded run.  Every attempted run
becomes one manifest row; snapshots and rendered images land next to the
manifest under the sweep output directory.  Combinations with
a0 + b0 >= 0.95 are skipped up front (the solvent fraction gets too thin
for the solver to be trustworthy) and logged rather than recorded.

Images encode the three molar-fraction fields as RGB channels.  The
preprocessing path resamples them to a fixed resolution with a separable
bilinear kernel and flattens the three channel planes into one feature
vector, scaled to [0, 1].
"""

from __future__ import annotations

import csv
import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .grid import FieldPair
from .solver import ConfigError, SimConfig, run, write_snapshot

log = logging.getLogger(__name__)

CHI_MAX = 0.02
COMPOSITION_MARGIN = 0.95

# states whose final morphology is usable for the ML pipeline
ELIGIBLE_STATES = ("State1", "State3b")

MANIFEST_COLUMNS = (
    "run_id", "a0", "b0", "chi_ab", "chi_ac", "chi_bc",
    "n_a", "n_b", "n_c", "seed", "state_id",
    "gibbs_first", "gibbs_last", "snapshot_path", "image_path",
)


# ---------------------------------------------------------------------------
# sweep description

@dataclass(frozen=True)
class SweepSpec:
    """Grid of starting compositions and chi cases over one base config."""

    a0_values: tuple
    b0_values: tuple
    chi_cases: tuple           # of (chi_ab, chi_ac, chi_bc) triples
    base: SimConfig
    out_dir: str
    parallelism: int = 1

    def __post_init__(self):
        object.__setattr__(self, "a0_values", tuple(float(v) for v in self.a0_values))
        object.__setattr__(self, "b0_values", tuple(float(v) for v in self.b0_values))
        object.__setattr__(
            self, "chi_cases",
            tuple(tuple(float(c) for c in case) for case in self.chi_cases),
        )
        if not self.a0_values or not self.b0_values or not self.chi_cases:
            raise ConfigError("sweep axes must be nonempty")
        for case in self.chi_cases:
            if len(case) != 3:
                raise ConfigError("each chi case needs exactly three values")
            if any(c < 0.0 or c > CHI_MAX for c in case):
                raise ConfigError(f"chi values must lie in [0, {CHI_MAX}]")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be at least 1")


@dataclass(frozen=True)
class RunRecord:
    """One manifest row: parameters, outcome, and artifact paths."""

    run_id: str
    a0: float
    b0: float
    chi_ab: float
    chi_ac: float
    chi_bc: float
    n_a: float
    n_b: float
    n_c: float
    seed: int
    state_id: str
    gibbs_first: float
    gibbs_last: float
    snapshot_path: str
    image_path: str

    @property
    def dataset_eligible(self) -> bool:
        return self.state_id in ELIGIBLE_STATES


def hash_seed(base_seed: int, a0: float, b0: float, chi_case) -> int:
    """Stable per-run seed from the base seed and the run parameters.

    Runs are independent of sweep ordering and of each other, and a rerun
    of the same spec reproduces every stream.
    """
    key = "|".join([
        str(int(base_seed)), repr(float(a0)), repr(float(b0)),
        *(repr(float(c)) for c in chi_case),
    ])
    digest = hashlib.blake2b(key.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _run_id(case_idx: int, a0: float, b0: float) -> str:
    return f"r{case_idx:02d}a{round(a0 * 1000):04d}b{round(b0 * 1000):04d}"


# ---------------------------------------------------------------------------
# rendering and preprocessing

def render_rgb(f: FieldPair) -> np.ndarray:
    """8-bit RGB image of the composition fields, shape (ny, nx, 3).

    R, G, B carry a, b, c clamped to [0, 1] and scaled by 255; pixel row 0
    renders as the top of the domain.
    """
    channels = [np.clip(v, 0.0, 1.0) for v in (f.a, f.b, f.c)]
    img = np.stack([np.rint(255.0 * v) for v in channels], axis=-1)
    return img.astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    """Write an (h, w, 3) uint8 array as a PNG with deterministic bytes."""
    Image.fromarray(img, mode="RGB").save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def _linear_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-D bilinear resampling matrix (n_out, n_in).

    Sample centers follow the half-pixel convention, so an exact 2x
    downscale averages adjacent input pairs.
    """
    w = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(src).astype(int)
    frac = src - lo
    lo_c = np.clip(lo, 0, n_in - 1)
    hi_c = np.clip(lo + 1, 0, n_in - 1)
    rows = np.arange(n_out)
    w[rows, lo_c] += 1.0 - frac
    w[rows, hi_c] += frac
    return w


def resize_bilinear(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resample of a 2-D float plane to (out_h, out_w)."""
    if plane.ndim != 2 or plane.size == 0:
        raise ValueError("expected a nonempty 2-D plane")
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    wy = _linear_weights(plane.shape[0], out_h)
    wx = _linear_weights(plane.shape[1], out_w)
    return wy @ np.asarray(plane, dtype=np.float64) @ wx.T


def preprocess(img: np.ndarray, out_size: tuple = (200, 200)) -> np.ndarray:
    """Flatten an RGB morphology image into one feature vector in [0, 1].

    The image is resampled to ``out_size`` (height, width), split into its
    three channel planes, and the planes are flattened row-major and
    concatenated in channel order, giving a vector of length 3*h*w.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError("expected a nonempty (h, w, 3) image")
    out_h, out_w = int(out_size[0]), int(out_size[1])
    planes = [
        resize_bilinear(arr[..., ch] / 255.0, out_h, out_w).ravel()
        for ch in range(3)
    ]
    return np.clip(np.concatenate(planes), 0.0, 1.0)


# ---------------------------------------------------------------------------
# sweep execution

def _execute_one(task):
    """Run one sweep member and return its manifest row (worker-safe)."""
    base, case, a0, b0, seed, run_id, out_dir = task
    out = Path(out_dir)
    snap_rel = f"snapshots/{run_id}.chsnap"
    img_rel = f"images/{run_id}.png"
    p = base.params
    row = {
        "run_id": run_id,
        "a0": a0, "b0": b0,
        "chi_ab": case[0], "chi_ac": case[1], "chi_bc": case[2],
        "n_a": p.n_a, "n_b": p.n_b, "n_c": p.n_c,
        "seed": seed,
    }
    try:
        params = replace(p, chi_ab=case[0], chi_ac=case[1], chi_bc=case[2])
        cfg = replace(base, params=params, a0=a0, b0=b0, rng_seed=seed)
        res = run(cfg)
    except Exception as err:   # a failed run is a manifest row, not an abort
        log.warning("run %s failed: %s", run_id, err)
        row.update(state_id="error", gibbs_first=float("nan"),
                   gibbs_last=float("nan"), snapshot_path="", image_path="")
        return row
    write_snapshot(out / snap_rel, res.fields)
    save_png(render_rgb(res.fields), out / img_rel)
    row.update(
        state_id=res.state.value,
        gibbs_first=res.gibbs_trace[0][1],
        gibbs_last=res.gibbs_trace[-1][1],
        snapshot_path=snap_rel,
        image_path=img_rel,
    )
    return row


def run_sweep(spec: SweepSpec) -> list:
    """Execute the sweep and write ``manifest.csv`` under its out_dir.

    Returns the manifest as a run_id-sorted list of RunRecord.  Per-run
    failures become rows with state_id ``error``; invalid compositions
    (a0 + b0 >= 0.95) are logged and skipped without a row.
    """
    out = Path(spec.out_dir)
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)

    tasks = []
    for case_idx, case in enumerate(spec.chi_cases):
        for a0 in spec.a0_values:
            for b0 in spec.b0_values:
                if a0 + b0 >= COMPOSITION_MARGIN:
                    log.info(
                        "skipping a0=%g b0=%g: composition margin %.2f",
                        a0, b0, COMPOSITION_MARGIN,
                    )
                    continue
                seed = hash_seed(spec.base.rng_seed, a0, b0, case)
                tasks.append((spec.base, case, a0, b0, seed,
                              _run_id(case_idx, a0, b0), str(out)))

    if spec.parallelism > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=spec.parallelism) as pool:
            rows = list(pool.map(_execute_one, tasks))
    else:
        rows = [_execute_one(t) for t in tasks]

    records = sorted(
        (RunRecord(**row) for row in rows), key=lambda r: r.run_id
    )
    write_manifest(out / "manifest.csv", records)
    return records


# ---------------------------------------------------------------------------
# manifest IO

def write_manifest(path, records) -> None:
    """CSV manifest, one row per attempted run, sorted by run_id."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in sorted(records, key=lambda r: r.run_id):
            writer.writerow([
                r.run_id,
                repr(r.a0), repr(r.b0),
                repr(r.chi_ab), repr(r.chi_ac), repr(r.chi_bc),
                repr(r.n_a), repr(r.n_b), repr(r.n_c),
                str(r.seed), r.state_id,
                repr(r.gibbs_first), repr(r.gibbs_last),
                r.snapshot_path, r.image_path,
            ])


def read_manifest(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: unrecognized manifest header")
        records = []
        for row in reader:
            vals = dict(zip(MANIFEST_COLUMNS, row))
            records.append(RunRecord(
                run_id=vals["run_id"],
                a0=float(vals["a0"]), b0=float(vals["b0"]),
                chi_ab=float(vals["chi_ab"]), chi_ac=float(vals["chi_ac"]),
                chi_bc=float(vals["chi_bc"]),
                n_a=float(vals["n_a"]), n_b=float(vals["n_b"]),
                n_c=float(vals["n_c"]),
                seed=int(vals["seed"]), state_id=vals["state_id"],
                gibbs_first=float(vals["gibbs_first"]),
                gibbs_last=float(vals["gibbs_last"]),
                snapshot_path=vals["snapshot_path"],
                image_path=vals["image_path"],
            ))
    return records
