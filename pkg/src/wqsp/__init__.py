"""Water-quality sensor placement via observability of linear WQ dynamics."""

__version__ = "0.1.0"
