"""Caption/trace modeling toolkit: trace-to-box encoding, a mirrored
transformer for controlled caption, controlled trace, and joint generation,
the local bipartite matching trace distance, and caption metrics."""

__version__ = "0.1.0"
