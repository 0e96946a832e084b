# clims/__init__.py
"""
Class activation maps trained through image-text matching losses.
"""

__version__ = "0.1.0"
