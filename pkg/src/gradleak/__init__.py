"""Gradient-leakage laboratory for dropout-protected networks."""

from gradleak.autodiff import Graph, Node, backward

__all__ = ["Graph", "Node", "backward"]
__version__ = "0.1.0"
