"""
Fast-Slow Homogenizer

Homogenized limit and second-order averaged corrections of Hamiltonian
systems with fast oscillating degrees of freedom.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("fastslow-homogenizer")
except PackageNotFoundError:
    __version__ = "unknown"
