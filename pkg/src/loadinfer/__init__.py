"""Hourly load inference for customers with only monthly billing data.

Subpackages cover the full chain: synthetic AMI data and dataset
partitioning (amigen), self-tuning spectral clustering of daily profiles
(spectral), the monthly-to-hourly disaggregation cascade (mtsl), radial
power flow (feeder), branch-current WLS state estimation (bcse), recursive
Bayesian class identification (rbl), evaluation metrics (metrics) and the
experiment pipeline / CLI (pipeline, cli).
"""

__version__ = "0.1.0"
