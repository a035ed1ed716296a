"""Camera movement classification from directional grid motion encoding.

The pipeline turns short grayscale clips into 117-dimensional motion
descriptors (magnitude-weighted angular histograms of dense optical flow
over a 3x3 grid), optionally calibrates them across domains with z-score
statistics, and classifies them with a small trainable fusion head.
"""

__version__ = "0.1.0"

from dgme.errors import DataError, DgmeError, NumericError, UsageError

__all__ = ["__version__", "DgmeError", "UsageError", "DataError", "NumericError"]
