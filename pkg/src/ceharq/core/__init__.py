"""Simulation core: protocol sessions, thresholds, metrics and experiments."""
