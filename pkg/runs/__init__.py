"""
Command-line runs: flag parsing, orchestration and verification.
"""
