"""Bidirectional KV-cache acquisition: compute from the front, fetch from the back."""

from .codecs import IDENTITY, QUANT8, Codec, get_codec
from .model import (
    BandwidthTrace,
    ChunkSpec,
    CostModel,
    ModelProfile,
    RequestSpec,
    chunk_bytes,
    compute_latency,
    fetch_latency,
    kv_bytes_per_token,
    split_into_chunks,
)
from .scheduler import RunReport, oracle_best_split, run
from .store import ChunkKey, ChunkStore, chain_hash, populate

__version__ = "0.1.0"
