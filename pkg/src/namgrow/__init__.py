"""namgrow: growing neural additive models by re-using trained branches."""

__version__ = "0.1.0"
