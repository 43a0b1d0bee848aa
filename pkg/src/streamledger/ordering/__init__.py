"""Ordering service: replicated log nodes, block cutting and the client interface."""
from .blocks import BlockCutter, cut_block, cut_reason
from .client import OrdererClient, OrderingRejected, OrderingTimeout, deliver_stream
from .raft import (
    BLOCK,
    STREAM,
    NotFound,
    OrdererConfig,
    OrderingNode,
    SoloOrderer,
    start_cluster,
    wait_for_leader,
)
from .wire import Block, OrderedEntry

__all__ = [
    "BLOCK", "STREAM", "Block", "BlockCutter", "NotFound", "OrderedEntry", "OrdererClient",
    "OrdererConfig", "OrderingNode", "OrderingRejected", "OrderingTimeout", "SoloOrderer",
    "cut_block", "cut_reason", "deliver_stream", "start_cluster", "wait_for_leader",
]
