"""
Core grounding functionality: geometry, text I/O, model, losses and decoding.
"""
