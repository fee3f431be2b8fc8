"""
Local grounding playground.
"""
