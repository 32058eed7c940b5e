"""GrassNet: node classification with a selective state-space filter over the
ordered Laplacian spectrum."""

from .errors import (ConfigError, EigencacheError, EigenConvergenceError, GrassNetError,
                     GraphFormatError, ShapeError, TrainingDiverged)
from .graph import Graph, build_normalized_laplacian, load_graph, make_splits, save_graph
from .spectral import SpectralDecomposition, eig_sym, gft, igft, spectrum_kde

__all__ = [
    "ConfigError", "EigencacheError", "EigenConvergenceError", "GrassNetError",
    "GraphFormatError", "ShapeError", "TrainingDiverged", "Graph",
    "build_normalized_laplacian", "load_graph", "make_splits", "save_graph",
    "SpectralDecomposition", "eig_sym", "gft", "igft", "spectrum_kde",
]
