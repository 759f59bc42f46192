"""Decision-aware amortized experimental design with a transformer policy/predictor."""

__version__ = "0.1.0"
