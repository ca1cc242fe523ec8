"""Pasture monitoring pipeline: field synthesis, ConvLSTM forecasting with MC
dropout, intermittent multi-robot deployment planning, and LiDAR height
estimation."""

__version__ = "0.1.0"
