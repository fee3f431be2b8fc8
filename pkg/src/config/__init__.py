"""
Configuration: environment settings, desk-scale defaults and the run config schema.
"""
