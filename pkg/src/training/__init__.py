"""
Training samples, run logging, pseudo labels and the two training stages.
"""
