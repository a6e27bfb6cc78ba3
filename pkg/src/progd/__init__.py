"""Joint multi-agent motion forecasting with progressive dynamic scene graphs."""

__version__ = "0.1.0"
