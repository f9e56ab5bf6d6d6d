"""Space-time modelling of monitored pollutant fields and preferential-sampling tests."""

__version__ = "0.1.0"
