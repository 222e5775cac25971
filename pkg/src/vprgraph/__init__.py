"""Factor-graph refinement of place-recognition similarity matrices."""

__version__ = "0.1.0"
