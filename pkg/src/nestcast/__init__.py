"""nestcast: nested coarse-to-fine spatio-temporal forecasting.

Pipeline: spectral regionalization of node series, a cross-scale attention
forecaster guided by quantile forecasts of the regional future, scheduled
sampling training, and autoregressive patch rollout.
"""

__version__ = "0.1.0"
