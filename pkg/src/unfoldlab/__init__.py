"""Deep-unfolding laboratory.

Classical iterative optimizers (ISTA, alternating scaled-gradient robust
PCA), their unfolded trainable counterparts, loss/training machinery, and a
deterministic benchmark harness producing CSV/SVG reports.
"""

__version__ = "0.1.0"
