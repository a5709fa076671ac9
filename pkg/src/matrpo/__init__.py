"""Decentralized multi-agent TRPO with consensus ADMM over a communication graph."""
__version__ = "0.1.0"
