"""
Detection loss, optimizer and the training loop.
"""
