"""Gap filling for multispectral lake imagery."""

__version__ = "0.1.0"
