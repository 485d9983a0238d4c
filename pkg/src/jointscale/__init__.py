"""Joint attacks on image-scaling pipelines and the classifiers behind them."""

__version__ = "0.1.0"
