"""Aeromagnetic data processing: gridding, potential-field filters, Euler
deconvolution, spatial statistics, an SI classifier and plot-ready products."""

__version__ = "0.1.0"
