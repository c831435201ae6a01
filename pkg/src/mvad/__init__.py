"""Multi-view anomaly detection on precomputed embedding views.

Per-view autoencoders provide reconstruction scores, a cross-view
contrastive objective scores inter-view consistency, and a learned
allocation network weighs the views per sample before fusing.
"""

from .estimator import MultiViewAnomalyDetector

__all__ = ["MultiViewAnomalyDetector"]

__version__ = "0.1.0"
