"""Label-propagation domain adaptation for graph classification with tensorized topological GNNs."""

__version__ = "0.1.0"
