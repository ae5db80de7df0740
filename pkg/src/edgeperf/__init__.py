"""Edge network KPI collection, aggregation, trace replay and federation simulation."""

__version__ = "0.1.0"
