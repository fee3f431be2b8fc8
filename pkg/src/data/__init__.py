"""
Data layer: synthetic scene generation, dataset records and checkpoint files.
"""
