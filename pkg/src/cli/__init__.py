"""
Command-line verbs, presets and exit-code mapping.
"""
