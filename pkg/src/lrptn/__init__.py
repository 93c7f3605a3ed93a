"""Low-rank passthrough networks.

Highway and GRU models whose square state-transition matrices are
parametrized dense, as a low-rank product L.R, or as L.R plus a learned
diagonal; plus the synthetic sequence benchmarks, optimizers, and the
training harness used to exercise them.
"""

__version__ = "0.1.0"
