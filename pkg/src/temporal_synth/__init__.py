"""Temporal-logic task synthesis: scLTL automata, product MDPs, topological
value learning and a sequential actor-critic."""

__version__ = "0.1.0"
