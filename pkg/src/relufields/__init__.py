"""Dense grids with a single post-interpolation ReLU, fit by analytic gradients."""

import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
