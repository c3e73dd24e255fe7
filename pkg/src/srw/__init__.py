"""SHAP-driven sample reweighting for incremental retraining."""

__version__ = "0.1.0"
