"""Event-aware stock ranking on temporal knowledge graphs.

The package couples three embedding streams -- sequential price encodings,
temporal-point-process node embeddings fitted on dated graph events, and
relational attention over dated graph snapshots -- into a listwise ranking
head, and evaluates the result with a walk-forward backtest.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, DivergenceError

__all__ = ["ConfigError", "DataError", "DivergenceError", "__version__"]
