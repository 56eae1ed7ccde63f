"""Partial and asymmetric supervised contrastive learning for OOD detection
on long-tailed data, with a dual-branch network, synthetic benchmark, and an
exactly specified detection metric suite."""

__version__ = "0.1.0"
