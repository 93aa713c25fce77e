"""Random conformal welding of two GMC boundary measures, by numerical means."""

__version__ = "0.1.0"
