"""Constituency, dependency and head-lexicalized LSTMs for subject-verb agreement."""

__version__ = "0.1.0"
