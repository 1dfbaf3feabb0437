"""Composition -> morphology classification with Gaussian processes.

One binary latent GP per label (one-vs-rest), logistic likelihood, and a
Laplace approximation of each posterior.  The kernel is a fixed-width
squared exponential over (a0, b0).  Class probabilities come from the
probit-corrected sigmoid of the predictive latent and are normalized
across labels.

Training points are composition pairs with string labels.  The augment
step enlarges a training set with two fixed composition offsets per
point; offsets that leave the valid composition simplex are dropped and
counted.  Train/test splitting happens on the original points only, so
augmented copies never leak across the split.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GPC_MAGIC = b"GPCM0001"

AUG_PLUS = 0.002       # first copy shifts both fractions up by this
AUG_MINUS = 0.005      # second copy shifts both fractions down by this

MAP_A0_RANGE = (0.1, 0.8)
MAP_B0_RANGE = (0.1, 0.45)
MAP_MARGIN = 0.95


@dataclass(frozen=True)
class LabeledPoint:
    """One training example: starting composition and its label."""

    a0: float
    b0: float
    label: str
    origin: int = -1       # index of the original point this was derived from


@dataclass(frozen=True)
class AugmentationConfig:
    eps_plus: float = AUG_PLUS
    eps_minus: float = AUG_MINUS

    def __post_init__(self):
        if self.eps_plus <= 0.0 or self.eps_minus <= 0.0:
            raise ValueError("augmentation offsets must be positive")


def _in_simplex(a0: float, b0: float) -> bool:
    return a0 > 0.0 and b0 > 0.0 and a0 + b0 < 1.0


def augment(points, config: AugmentationConfig = AugmentationConfig()):
    """Expand each point with two same-label shifted copies.

    Returns (augmented_points, dropped): the originals plus, per point,
    (a0+eps, b0+eps) and (a0-eps', b0-eps') copies.  Copies that leave
    the open composition simplex are dropped and counted, so the output
    holds exactly ``3 * len(points) - dropped`` entries.  Copies inherit
    the label and record which original they came from.
    """
    out = []
    dropped = 0
    for i, p in enumerate(points):
        origin = p.origin if p.origin >= 0 else i
        out.append(LabeledPoint(p.a0, p.b0, p.label, origin=origin))
        for da in (config.eps_plus, -config.eps_minus):
            a0, b0 = p.a0 + da, p.b0 + da
            if _in_simplex(a0, b0):
                out.append(LabeledPoint(a0, b0, p.label, origin=origin))
            else:
                dropped += 1
    return out, dropped


def split_points(points, test_fraction: float = 0.2, seed: int = 0):
    """Stratified train/test split over original points.

    Shuffles within each label with the given seed and reserves the
    requested fraction (at least one point per label when a label has
    more than one) for testing.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    by_label: dict = {}
    for i, p in enumerate(points):
        by_label.setdefault(p.label, []).append(i)
    train_idx, test_idx = [], []
    for label in sorted(by_label):
        idx = np.array(by_label[label])
        rng.shuffle(idx)
        n_test = int(round(test_fraction * idx.size))
        if idx.size > 1:
            n_test = min(max(n_test, 1), idx.size - 1)
        else:
            n_test = 0
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    train = [points[i] for i in sorted(train_idx)]
    test = [points[i] for i in sorted(test_idx)]
    return train, test


# ---------------------------------------------------------------------------
# kernel and Laplace fit

def _kernel(xa: np.ndarray, xb: np.ndarray, length_scale: float) -> np.ndarray:
    d2 = ((xa[:, None, :] - xb[None, :, :]) ** 2).sum(axis=-1)
    return np.exp(-0.5 * d2 / length_scale**2)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class GpcModel:
    """Fitted one-vs-rest GP classifier.

    ``latent_modes`` holds one Laplace mode per class (row order matches
    ``class_ids``).  Predictive caches are rebuilt from the modes, so the
    model serializes to the training inputs, labels, and modes alone.
    """

    x: np.ndarray              # (n, 2) training compositions
    label_idx: np.ndarray      # (n,) index into class_ids
    class_ids: tuple           # sorted label strings
    latent_modes: np.ndarray   # (k, n)
    length_scale: float = 1.0
    jitter: float = 1e-8

    def __post_init__(self):
        k = _kernel(self.x, self.x, self.length_scale)
        k[np.diag_indices_from(k)] += self.jitter
        grads, roots, chols = [], [], []
        for ci in range(len(self.class_ids)):
            t = (self.label_idx == ci).astype(np.float64)
            pi = _sigmoid(self.latent_modes[ci])
            w_root = np.sqrt(pi * (1.0 - pi))
            b = np.eye(self.x.shape[0]) + w_root[:, None] * k * w_root[None, :]
            grads.append(t - pi)
            roots.append(w_root)
            chols.append(np.linalg.cholesky(b))
        object.__setattr__(self, "_grads", np.array(grads))
        object.__setattr__(self, "_w_roots", np.array(roots))
        object.__setattr__(self, "_chols", np.array(chols))


def _laplace_mode(k: np.ndarray, t: np.ndarray, tol: float = 1e-6,
                  max_iter: int = 100):
    """Newton iteration for the Laplace mode of one binary latent GP.

    Returns the mode f.  Convergence is the max-norm of the posterior
    gradient (t - pi) - K^{-1} f, tracked through the natural-parameter
    vector so K is never inverted explicitly.
    """
    n = t.shape[0]
    f = np.zeros(n)
    a = np.zeros(n)
    for _ in range(max_iter):
        pi = _sigmoid(f)
        grad = (t - pi) - a
        if np.abs(grad).max() < tol:
            return f
        w = pi * (1.0 - pi)
        w_root = np.sqrt(w)
        b = np.eye(n) + w_root[:, None] * k * w_root[None, :]
        chol = np.linalg.cholesky(b)
        rhs = w * f + (t - pi)
        v = np.linalg.solve(chol, w_root * (k @ rhs))
        a = rhs - w_root * np.linalg.solve(chol.T, v)
        f = k @ a
    return None


def gpc_fit(points, length_scale: float = 1.0, jitter: float = 1e-8) -> GpcModel:
    """Fit the one-vs-rest Laplace GP classifier on labeled compositions."""
    class_ids = tuple(sorted({p.label for p in points}))
    if len(class_ids) < 2:
        raise FitError("need at least two distinct labels")
    counts = {c: sum(p.label == c for p in points) for c in class_ids}
    thin = [c for c, n in counts.items() if n < 3]
    if thin:
        raise FitError(f"labels with fewer than 3 points: {', '.join(thin)}")
    x = np.array([(p.a0, p.b0) for p in points], dtype=np.float64)
    label_idx = np.array([class_ids.index(p.label) for p in points])
    k = _kernel(x, x, length_scale)
    k[np.diag_indices_from(k)] += jitter
    modes = []
    for ci, label in enumerate(class_ids):
        t = (label_idx == ci).astype(np.float64)
        f = _laplace_mode(k, t)
        if f is None:
            raise FitError(f"Newton did not converge for label {label}")
        modes.append(f)
    return GpcModel(x=x, label_idx=label_idx, class_ids=class_ids,
                    latent_modes=np.array(modes), length_scale=length_scale,
                    jitter=jitter)


def gpc_predict(model: GpcModel, queries: np.ndarray):
    """Class probabilities and labels for query compositions.

    Each binary latent contributes a probit-corrected sigmoid
    probability; the per-class values are normalized to sum to one.
    Returns (probs (m, k), labels list).  Far from all training data the
    latents vanish and the profile flattens toward the uniform ratio of
    zero-latent sigmoids.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != 2:
        raise ValueError("queries must have two columns (a0, b0)")
    ks = _kernel(q, model.x, model.length_scale)        # (m, n)
    probs = np.empty((q.shape[0], len(model.class_ids)))
    for ci in range(len(model.class_ids)):
        mean = ks @ model._grads[ci]
        v = np.linalg.solve(model._chols[ci],
                            (model._w_roots[ci][None, :] * ks).T)
        var = np.maximum(1.0 - (v * v).sum(axis=0), 0.0)
        probs[:, ci] = _sigmoid(mean / np.sqrt(1.0 + np.pi * var / 8.0))
    probs /= probs.sum(axis=1, keepdims=True)
    labels = [model.class_ids[i] for i in probs.argmax(axis=1)]
    return probs, labels


def evaluate(model: GpcModel, points) -> float:
    """Fraction of points whose predicted label matches."""
    if not points:
        raise ValueError("empty test set")
    q = np.array([(p.a0, p.b0) for p in points])
    _, labels = gpc_predict(model, q)
    hits = sum(pred == p.label for pred, p in zip(labels, points))
    return hits / len(points)


# ---------------------------------------------------------------------------
# prediction map

def prediction_map(model: GpcModel, a0_range: tuple = MAP_A0_RANGE,
                   b0_range: tuple = MAP_B0_RANGE,
                   resolution: tuple = (71, 36)):
    """Dense label map over a composition window.

    Returns (a0 axis, b0 axis, label index grid, max-probability grid)
    with shape (len(b0), len(a0)); grid points with a0 + b0 >= 0.95 are
    masked with label index -1 and probability nan.
    """
    a_axis = np.linspace(a0_range[0], a0_range[1], int(resolution[0]))
    b_axis = np.linspace(b0_range[0], b0_range[1], int(resolution[1]))
    aa, bb = np.meshgrid(a_axis, b_axis)
    valid = (aa + bb) < MAP_MARGIN
    queries = np.column_stack([aa[valid], bb[valid]])
    label_grid = np.full(aa.shape, -1, dtype=np.int64)
    prob_grid = np.full(aa.shape, np.nan)
    if queries.size:
        probs, _ = gpc_predict(model, queries)
        label_grid[valid] = probs.argmax(axis=1)
        prob_grid[valid] = probs.max(axis=1)
    return a_axis, b_axis, label_grid, prob_grid


def write_map_csv(path, model: GpcModel, a_axis, b_axis, label_grid,
                  prob_grid) -> None:
    """CSV of (a0, b0, label, max_prob) over the unmasked grid points."""
    with open(path, "w", newline="") as fh:
        fh.write("a0,b0,label,max_prob\n")
        for j, b0 in enumerate(b_axis):
            for i, a0 in enumerate(a_axis):
                ci = label_grid[j, i]
                if ci < 0:
                    continue
                fh.write(f"{float(a0)!r},{float(b0)!r},{model.class_ids[ci]},"
                         f"{float(prob_grid[j, i])!r}\n")


# distinguishable fill colors for up to ten classes, grey for masked cells
MAP_PALETTE = (
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207),
)
MAP_MASK_COLOR = (220, 220, 220)


def write_map_png(path, model: GpcModel, label_grid) -> None:
    """Color-indexed PNG of the label map plus a JSON legend sidecar.

    Pixel row 0 is the highest b0 row.  The legend maps each RGB color
    to its label so the image stays self-describing.
    """
    import json

    from PIL import Image

    h, w = label_grid.shape
    rgb = np.empty((h, w, 3), dtype=np.uint8)
    rgb[...] = MAP_MASK_COLOR
    for ci in range(len(model.class_ids)):
        rgb[label_grid == ci] = MAP_PALETTE[ci % len(MAP_PALETTE)]
    rgb = rgb[::-1]        # b0 increases upward in the image
    scale = max(1, 256 // max(h, w))
    img = Image.fromarray(rgb, mode="RGB")
    if scale > 1:
        img = img.resize((w * scale, h * scale), Image.NEAREST)
    img.save(path, format="PNG", optimize=False)
    legend = {
        "masked": list(MAP_MASK_COLOR),
        "classes": {
            label: list(MAP_PALETTE[ci % len(MAP_PALETTE)])
            for ci, label in enumerate(model.class_ids)
        },
    }
    sidecar = Path(path).with_suffix(".legend.json")
    sidecar.write_text(json.dumps(legend, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# model IO

def save_gpc(path, model: GpcModel) -> None:
    """Flat little-endian binary with magic GPCM0001.

    Layout: magic, n and k as u32, length_scale and jitter as f64, the
    class id table (u32 count-prefixed utf-8 strings), label indices
    (i64), training inputs (n x 2 f64), latent modes (k x n f64).
    """
    n = model.x.shape[0]
    k = len(model.class_ids)
    with open(path, "wb") as fh:
        fh.write(GPC_MAGIC)
        fh.write(struct.pack("<II", n, k))
        fh.write(struct.pack("<dd", model.length_scale, model.jitter))
        for label in model.class_ids:
            raw = label.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(model.label_idx.astype("<i8").tobytes())
        fh.write(model.x.astype("<f8").tobytes())
        fh.write(model.latent_modes.astype("<f8").tobytes())


def load_gpc(path) -> GpcModel:
    raw = Path(path).read_bytes()
    if raw[:8] != GPC_MAGIC:
        raise ValueError(f"{path}: not a GPC model file")
    n, k = struct.unpack_from("<II", raw, 8)
    length_scale, jitter = struct.unpack_from("<dd", raw, 16)
    off = 32
    class_ids = []
    for _ in range(k):
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        class_ids.append(raw[off:off + ln].decode())
        off += ln
    need = off + 8 * (n + 2 * n + k * n)
    if len(raw) != need:
        raise ValueError(f"{path}: truncated or oversized payload")
    label_idx = np.frombuffer(raw, "<i8", n, off).copy()
    off += 8 * n
    x = np.frombuffer(raw, "<f8", 2 * n, off).reshape(n, 2).copy()
    off += 16 * n
    modes = np.frombuffer(raw, "<f8", k * n, off).reshape(k, n).copy()
    return GpcModel(x=x, label_idx=label_idx, class_ids=tuple(class_ids),
                    latent_modes=modes, length_scale=length_scale,
                    jitter=jitter)
