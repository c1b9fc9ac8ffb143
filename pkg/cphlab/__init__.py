"""
Goal: cphlab package root. Constant-pH lambda dynamics on model Hamiltonians
plus the titration analysis that turns lambda trajectories into pKa values.
"""

__version__ = "0.4.0"
TOOL_NAME = "cphlab"
