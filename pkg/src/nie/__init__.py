"""Removal-based node influence for message-passing GNNs.

Train a small GNN, measure how much each node's removal would change the
model's predictions (exactly by brute force, or for all nodes at once from
one forward and one backward pass), and evaluate approximations against the
exact scores.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    DatasetError,
    DivergenceError,
    NieError,
    ShapeError,
    TapeError,
    UndefinedCorrelationError,
    ValidationError,
)
from .graph import Graph, RemovalView, SplitSpec, load_dataset, remove_node  # noqa: F401
from .oracle import InfluenceScores  # noqa: F401
