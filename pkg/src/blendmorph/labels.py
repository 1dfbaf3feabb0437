"""Rule-based morphology labels from final composition fields.

A label has the form ``<continuous>-<structure>``:

* ``continuous`` is the species (a, b, or c) with the largest mean
  fraction, read as the matrix phase.
* ``structure`` describes the most strongly segregated species s*, the
  one with the largest spatial standard deviation:

  - ``flat`` if that deviation is below ``FLAT_STD``: nothing demixed.
  - Otherwise the s* field is smoothed with a small Gaussian (periodic
    in x, clamped at the y walls), thresholded at its mean, and the
    minority side of the threshold is taken as the dispersed structure.
    Connected components are found with 4-connectivity and stitched
    across the periodic x seam.  ``weave`` if any component percolates
    (covers every x column, or touches both y walls); ``drops``
    otherwise.

The rules are deliberately coarse: they only need to be deterministic
and consistent across nearby compositions so a classifier can learn the
composition -> label map.
"""

from __future__ import annotations

import csv

import numpy as np
from scipy import ndimage

from .grid import FieldPair

FLAT_STD = 0.02
SMOOTH_SIGMA = 1.0

SPECIES = ("a", "b", "c")


def _percolates(mask: np.ndarray) -> bool:
    """True if any connected component of mask spans x or y.

    Components are 4-connected, merged across the periodic x seam via
    union-find over seam-adjacent label pairs.
    """
    labeled, n = ndimage.label(mask)
    if n == 0:
        return False
    parent = list(range(n + 1))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    left, right = labeled[:, 0], labeled[:, -1]
    for li, ri in zip(left, right):
        if li and ri and find(li) != find(ri):
            parent[find(li)] = find(ri)

    roots = np.array([find(i) for i in range(n + 1)])
    merged = roots[labeled]

    ny, nx = mask.shape
    for root in np.unique(merged[mask]):
        rows, cols = np.nonzero(merged == root)
        if np.unique(cols).size == nx:
            return True
        if rows.min() == 0 and rows.max() == ny - 1:
            return True
    return False


def rule_label(f: FieldPair) -> str:
    """Assign a ``<continuous>-<structure>`` label to one morphology."""
    fields = (f.a, f.b, f.c)
    continuous = SPECIES[int(np.argmax([v.mean() for v in fields]))]

    stds = [float(v.std()) for v in fields]
    star = int(np.argmax(stds))
    if stds[star] < FLAT_STD:
        return f"{continuous}-flat"

    smooth = ndimage.gaussian_filter(
        fields[star], sigma=SMOOTH_SIGMA, mode=("nearest", "wrap")
    )
    mask = smooth > smooth.mean()
    if mask.mean() > 0.5:
        mask = ~mask
    structure = "weave" if _percolates(mask) else "drops"
    return f"{continuous}-{structure}"


# ---------------------------------------------------------------------------
# label CSV IO (shared by the clustering and classification paths)

def write_labels_csv(path, pairs) -> None:
    """Write (run_id, label) pairs as a two-column CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run_id", "label"])
        for run_id, label in pairs:
            writer.writerow([run_id, str(label)])


def read_labels_csv(path) -> dict:
    """Read a labels CSV back as {run_id: label}."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["run_id", "label"]:
            raise ValueError(f"{path}: expected header run_id,label")
        return {row[0]: row[1] for row in reader}
