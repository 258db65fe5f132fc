"""Desk-scale laboratory for fundus-to-OCT diabetic macular edema screening models."""

__version__ = "0.1.0"
