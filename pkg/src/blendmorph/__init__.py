"""Ternary polymer blend demixing: simulation, sweeps, and morphology-map learning.

The package is organized around the path from composition to morphology:

- :mod:`blendmorph.grid` -- structured 2-D grid, fields, discrete operators
- :mod:`blendmorph.energetics` -- mixing energy, chemical potential differences
- :mod:`blendmorph.solver` -- implicit time integration of the demixing dynamics
- :mod:`blendmorph.sweep` -- parameter sweeps, image rendering, preprocessing
- :mod:`blendmorph.labels` -- rule-based morphology labeling of final states
- :mod:`blendmorph.mlkit` -- PCA, k-means, affinity propagation
- :mod:`blendmorph.gpc` -- Gaussian-process classification of composition maps
- :mod:`blendmorph.cli` -- command line entry points
"""

__version__ = "0.1.0"
