"""Edge-deployed VLM perception pipeline and benchmark harness."""

__version__ = "0.1.0"
