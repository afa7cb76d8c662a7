"""Datasets, angle tracks and the synthetic generator."""
