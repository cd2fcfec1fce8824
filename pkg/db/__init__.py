"""
Persistence: the binary checkpoint format.
"""
