"""Offline exporter producing query-bank asset files for the 3D segmentation pipeline."""

__version__ = "0.1.0"
