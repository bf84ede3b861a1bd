"""
cotlab: conditional optimal transport with partially convex potential maps
(PCP-Map) and OT-regularized continuous flows (COT-Flow).
"""

__version__ = "0.1.0"
