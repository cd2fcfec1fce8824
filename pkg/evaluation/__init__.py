"""
Detection metrics and model evaluation.
"""
