"""Runtime safety shielding with a tube-verified model-predictive backup.

A shield wraps an arbitrary task policy: at every step it certifies that the
predicted next state is robustly recoverable by a backup controller (tracking
NMPC into a stabilized equilibrium) under sampled stochastic disturbances,
and overrides the policy with the backup whenever certification fails.
"""

__version__ = "0.1.0"
