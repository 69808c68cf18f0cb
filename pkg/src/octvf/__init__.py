"""Visual-field estimation from circumpapillary OCT ring scans and SLO images."""

__version__ = "0.1.0"
