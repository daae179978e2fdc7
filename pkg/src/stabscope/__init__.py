"""stabscope: numerical probes of damped-wave stabilization with confinement.

The package cross-validates three geometric conditions on a damping
coefficient (ray control, turning-surface thickness, flow control), builds
the localized quasimodes that witness their failure, and checks both against
direct energy decay, resolvent growth, and spectral computations for the
damped wave equation with a confining potential.
"""

__version__ = "0.1.0"

from . import damping, dynamics, evolution, fields, potentials, quasimodes  # noqa: F401
