"""hotmoe: desk-scale MoE adaptation lab with activation-profiled adapter placement."""

__version__ = "0.1.0"
