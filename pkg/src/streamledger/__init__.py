"""A streaming execute-order-validate ledger with a block-batching baseline."""

__version__ = "0.1.0"
