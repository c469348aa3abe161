"""Desk-scale lab for temporal parameter-efficient adapters on a frozen clip-QA model."""

__version__ = "0.1.0"
