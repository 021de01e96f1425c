"""
Sliced Attention - sort-and-scan ReLU attention with reference oracles,
gradient checks and constructive expressivity tools.
"""

__version__ = "1.0.0"
__author__ = "Sliced Attention Team"
