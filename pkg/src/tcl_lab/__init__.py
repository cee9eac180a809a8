"""Multi-stage motion forecasting with learned prior compensation factors."""

__version__ = "0.1.0"
