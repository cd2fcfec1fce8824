"""
The detector: composite blocks, dynamic convolution, mixed attention,
translation-variant convolution and the assembled model.
"""
