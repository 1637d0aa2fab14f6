"""Consensus-routed test-time self-curriculum."""
