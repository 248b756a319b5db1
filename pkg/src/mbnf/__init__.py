"""Model-based RL for stock trading with normalizing-flow dynamics."""

__version__ = "0.1.0"
