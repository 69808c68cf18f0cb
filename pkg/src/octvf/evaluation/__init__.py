"""Metrics, bootstrap intervals, sector/pointwise analyses and report rendering."""
