"""
Dataset records, synthetic scene generation and on-disk storage.
"""
