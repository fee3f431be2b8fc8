"""
CoordGround - Source Package
============================

Coordinate-as-language visual grounding on a synthetic referring-expression
benchmark: scene generation, the tiny encoder-decoder model, coordinate
activation and REG/REC cycle training, and the evaluation harness.
"""

__version__ = "1.0.0"
