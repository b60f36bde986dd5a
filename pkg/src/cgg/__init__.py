"""CNN-GRU-GAT gait classifier for Parkinson's disease detection from vGRF sensors."""

__version__ = "0.1.0"
