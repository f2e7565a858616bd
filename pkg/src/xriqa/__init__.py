"""Cross-resolution image quality assessment toolkit.

Library-first: study content preparation (stratified sampling, Lanczos tier
pyramids), the annotation study protocol and its live HTTP service,
reliability statistics (SOS, ICC, rank correlations, signed-rank tests),
legacy score alignment, and a desk-scale two-column multi-level quality
predictor with its training and evaluation harness.
"""

from . import alignment, data, harness, imaging, model, protocol, sampling, service, stats

__version__ = "0.1.0"

__all__ = ["alignment", "data", "harness", "imaging", "model", "protocol",
           "sampling", "service", "stats", "__version__"]
