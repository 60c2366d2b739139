"""Logical and structural anomaly detection on a synthetic multi-object benchmark.

Two cooperating models over frozen patch features: a hierarchical
vector-quantized transformer whose reconstruction error flags structural
anomalies (and whose codebooks tokenize images), and a masked-prediction
transformer whose histogram-of-codes prediction error flags logical
anomalies. Standardized scores are summed into the final anomaly score.
"""

__version__ = "0.1.0"
