"""Simulation and verification harness for the stationary O'Connell-Yor lattice
in the intermediate-disorder scaling ``beta = n^{-1/4}``."""

from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"
