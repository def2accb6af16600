"""Thresholded lexicographic multi-objective DQN with a desk-scale
traffic micro-simulator, tabular correctness oracles, and a four-objective
driving agent."""

__version__ = "0.1.0"
