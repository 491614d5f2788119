"""ptkit: numerical nonlinear potential theory on model domains.

Subpackages: domains (grids, shells, coarea), exhaustion (special exhaustion
functions and their verification), capacity (condenser p-capacity and type
classification), wtforms (structure conditions, integration by parts,
A-harmonic solves, maximum principle), energy (growth estimates, the
epsilon-characteristic, N-means, tract counting), cli (batch front-end).
"""

__version__ = "0.1.0"
