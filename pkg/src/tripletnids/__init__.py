"""Few-shot network intrusion detection with online triplet mining and KNN inference."""

__version__ = "0.1.0"
