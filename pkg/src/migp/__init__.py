"""Similarity-aware compromised-credential checking.

Submodules are the public surface: ``group``, ``oprf``, ``similarity``,
``pipeline``, ``server``, ``client``, ``ratelimit``, ``attack``,
``cli``.  Nothing is re-exported here so that importing the protocol
core never drags in the HTTP or simulation layers.
"""

__version__ = "0.1.0"
