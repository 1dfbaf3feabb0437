"""Dimensionality reduction and clustering for morphology feature vectors.

Everything here is implemented directly on numpy: mean-centered SVD for
principal components, seeded k-means++ with Lloyd iterations and restart
selection, an elbow rule on the within-cluster sum of squares, and
damped affinity propagation with a median-similarity preference.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sweep import ELIGIBLE_STATES, load_png, preprocess, read_manifest

PCA_MAGIC = b"PCAM0001"


# ---------------------------------------------------------------------------
# dataset assembly

@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus the manifest rows it was built from."""

    x: np.ndarray              # (n_samples, n_features)
    records: tuple             # matching RunRecord per row


def load_dataset(manifest_path, image_size: tuple = (200, 200),
                 eligible_only: bool = True) -> Dataset:
    """Build the clustering dataset from a sweep manifest.

    Keeps rows whose state marks a usable morphology (States 1 and 3b)
    unless ``eligible_only`` is off, loads each run's image, and stacks
    the preprocessed feature vectors row by row in manifest order.
    """
    manifest_path = Path(manifest_path)
    records = read_manifest(manifest_path)
    if eligible_only:
        records = [r for r in records if r.state_id in ELIGIBLE_STATES]
    if not records:
        raise ValueError(f"{manifest_path}: no usable runs in manifest")
    base = manifest_path.parent
    rows = [
        preprocess(load_png(base / r.image_path), image_size)
        for r in records
    ]
    x = np.vstack(rows)
    if not np.isfinite(x).all():
        raise ValueError("dataset contains non-finite features")
    return Dataset(x=x, records=tuple(records))


# ---------------------------------------------------------------------------
# principal components

@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray                  # (n_features,)
    components: np.ndarray            # (q, n_features), orthonormal rows
    explained_variance: np.ndarray    # (q,)


def pca_fit(x: np.ndarray, q: int) -> PcaModel:
    """Principal components of x via SVD of the mean-centered matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a 2-D sample matrix")
    n, f = x.shape
    if not 1 <= q <= min(n - 1, f):
        raise ValueError(f"q={q} outside [1, {min(n - 1, f)}]")
    mean = x.mean(axis=0)
    xc = x - mean
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    if s[0] <= 1e-12 * max(1.0, float(np.abs(x).max())):
        raise ValueError("zero-variance input: all samples identical")
    components = vt[:q].copy()
    # sign convention: the largest-magnitude entry of each row is positive
    for row in components:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0.0:
            row *= -1.0
    return PcaModel(
        mean=mean,
        components=components,
        explained_variance=(s[:q] ** 2) / (n - 1),
    )


def pca_transform(model: PcaModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.mean.shape[0]:
        raise ValueError("sample dimension does not match the model")
    return (x - model.mean) @ model.components.T


def save_pca(path, model: PcaModel) -> None:
    """Flat little-endian binary: magic, dims, mean, components, variances."""
    q, f = model.components.shape
    with open(path, "wb") as fh:
        fh.write(PCA_MAGIC)
        fh.write(struct.pack("<II", q, f))
        fh.write(model.mean.astype("<f8").tobytes())
        fh.write(model.components.astype("<f8").tobytes())
        fh.write(model.explained_variance.astype("<f8").tobytes())


def load_pca(path) -> PcaModel:
    raw = Path(path).read_bytes()
    if raw[:8] != PCA_MAGIC:
        raise ValueError(f"{path}: not a PCA model file")
    q, f = struct.unpack_from("<II", raw, 8)
    need = 16 + 8 * (f + q * f + q)
    if len(raw) != need:
        raise ValueError(f"{path}: truncated or oversized payload")
    off = 16
    mean = np.frombuffer(raw, "<f8", f, off).copy()
    off += 8 * f
    comps = np.frombuffer(raw, "<f8", q * f, off).reshape(q, f).copy()
    off += 8 * q * f
    ev = np.frombuffer(raw, "<f8", q, off).copy()
    return PcaModel(mean=mean, components=comps, explained_variance=ev)


# ---------------------------------------------------------------------------
# k-means

@dataclass(frozen=True)
class ClusterResult:
    labels: np.ndarray
    k: int
    wcss: float
    centers: np.ndarray | None = None      # k-means only
    exemplars: np.ndarray | None = None    # affinity propagation only
    converged: bool = True
    wcss_history: tuple = field(default=())


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("nkf,nkf->nk", diff, diff)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: squared-distance-weighted center draws."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[i:] = x[rng.integers(n, size=k - i)]
            break
        centers[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(axis=1))
    return centers


def kmeans(x: np.ndarray, k: int, seed: int = 0, n_restarts: int = 10,
           max_iter: int = 300) -> ClusterResult:
    """Seeded k-means: best of ``n_restarts`` runs by final wcss.

    Each restart runs Lloyd iterations until the label assignment stops
    changing or ``max_iter`` is hit.  The per-iteration wcss history of
    the winning restart is kept; it is non-increasing by construction.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < k or k < 1:
        raise ValueError("need at least k samples and k >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_restarts):
        centers = _kmeans_pp(x, k, rng)
        labels = np.full(x.shape[0], -1)
        history = []
        for _ in range(max_iter):
            d2 = _sq_dists(x, centers)
            new_labels = d2.argmin(axis=1)
            history.append(float(d2[np.arange(x.shape[0]), new_labels].sum()))
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for c in range(k):
                sel = labels == c
                if sel.any():
                    centers[c] = x[sel].mean(axis=0)
                else:
                    # reseed an emptied cluster to the worst-fit point
                    centers[c] = x[int(d2.min(axis=1).argmax())]
        wcss = history[-1]
        if best is None or wcss < best[0]:
            best = (wcss, labels, centers.copy(), tuple(history))
    wcss, labels, centers, history = best
    return ClusterResult(labels=labels, k=k, wcss=wcss, centers=centers,
                         wcss_history=history)


@dataclass(frozen=True)
class ElbowResult:
    k_star: int
    flat: bool
    ks: tuple
    wcss: tuple


def elbow_select(x: np.ndarray, k_min: int = 1, k_max: int = 8,
                 seed: int = 0) -> ElbowResult:
    """Pick k at the sharpest interior bend of the wcss-vs-k curve.

    The bend score is the second difference wcss(k-1) - 2 wcss(k) +
    wcss(k+1).  Data with essentially zero spread at k_min carries no
    bend information; that case returns k_min with the flat flag set.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= k_min < k_max:
        raise ValueError("need 1 <= k_min < k_max")
    if k_max > x.shape[0]:
        raise ValueError("k_max exceeds the sample count")
    ks = tuple(range(k_min, k_max + 1))
    wcss = tuple(kmeans(x, k, seed=seed + k).wcss for k in ks)
    scale = max(1.0, float(np.mean((x - x.mean(axis=0)) ** 2)) * x.shape[0])
    if wcss[0] <= 1e-12 * scale:
        return ElbowResult(k_star=k_min, flat=True, ks=ks, wcss=wcss)
    second = [wcss[i - 1] - 2.0 * wcss[i] + wcss[i + 1]
              for i in range(1, len(ks) - 1)]
    if not second:
        return ElbowResult(k_star=k_min, flat=True, ks=ks, wcss=wcss)
    k_star = ks[1 + int(np.argmax(second))]
    return ElbowResult(k_star=k_star, flat=False, ks=ks, wcss=wcss)


# ---------------------------------------------------------------------------
# affinity propagation

# presets for clustering the full-scale morphology dataset: heavier
# damping for the slow election over hundreds of images, with a strongly
# negative preference to bias toward few exemplars
FULL_SCALE_AP_DAMPING = 0.9
FULL_SCALE_AP_PREFERENCE = -250.0


def affinity_propagation(x: np.ndarray, preference: float | None = None,
                         damping: float = 0.5, max_iter: int = 1000,
                         stable_iter: int = 15) -> ClusterResult:
    """Exemplar-based clustering via damped message passing.

    Similarity is negative squared euclidean distance; the self-similarity
    (preference) defaults to the median off-diagonal similarity.  The
    exemplar set must hold still for ``stable_iter`` consecutive sweeps to
    count as converged; otherwise the best-effort labeling is returned
    with ``converged`` false.  If no point elects itself, the single most
    central candidate becomes the exemplar.

    Heavier damping slows the zero-start transient as well as the
    oscillations it is meant to suppress; with small datasets prefer the
    0.5 default so the stability window outlives the startup phase.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("expected a nonempty 2-D sample matrix")
    if not 0.5 <= damping < 1.0:
        raise ValueError("damping must lie in [0.5, 1)")
    n = x.shape[0]
    diff = x[:, None, :] - x[None, :, :]
    s = -np.einsum("ijf,ijf->ij", diff, diff)
    if preference is None:
        off = ~np.eye(n, dtype=bool)
        preference = float(np.median(s[off])) if n > 1 else 0.0
    np.fill_diagonal(s, preference)

    r = np.zeros((n, n))
    a = np.zeros((n, n))
    idx = np.arange(n)
    prev = None
    stable = 0
    converged = False
    for _ in range(max_iter):
        # responsibilities
        as_ = a + s
        first = as_.argmax(axis=1)
        best = as_[idx, first]
        as_[idx, first] = -np.inf
        second = as_.max(axis=1)
        r_new = s - best[:, None]
        r_new[idx, first] = s[idx, first] - second
        r = damping * r + (1.0 - damping) * r_new
        # availabilities
        rp = np.maximum(r, 0.0)
        np.fill_diagonal(rp, r.diagonal())
        col = rp.sum(axis=0)
        a_new = np.minimum(0.0, col[None, :] - rp)
        np.fill_diagonal(a_new, col - r.diagonal())
        a = damping * a + (1.0 - damping) * a_new

        exemplars = np.flatnonzero(r.diagonal() + a.diagonal() > 0.0)
        # an empty set is the pre-election transient, never convergence
        if exemplars.size and prev is not None \
                and np.array_equal(exemplars, prev):
            stable += 1
            if stable >= stable_iter:
                converged = True
                break
        else:
            stable = 0
        prev = exemplars

    if exemplars.size == 0:
        exemplars = np.array([int((r.diagonal() + a.diagonal()).argmax())])
    labels = exemplars[s[:, exemplars].argmax(axis=1)]
    labels[exemplars] = exemplars      # exemplars always label themselves
    # compact labels to 0..k-1 in exemplar order
    remap = {int(e): i for i, e in enumerate(exemplars)}
    compact = np.array([remap[int(l)] for l in labels])
    centers = x[exemplars]
    wcss = float(((x - centers[compact]) ** 2).sum())
    return ClusterResult(labels=compact, k=int(exemplars.size), wcss=wcss,
                         exemplars=exemplars, converged=converged)
