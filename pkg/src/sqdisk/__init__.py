"""Copy-on-write snapshot chains with a plain chain-walk engine and a direct-access engine."""
from .chainstore import (
    Chain,
    ChainError,
    ChainManifest,
    convert,
    create_base,
    open_chain,
    snapshot_scalable,
    snapshot_vanilla,
    stream,
)
from .engine_base import CorruptionError, EngineError
from .engine_scalable import ScalableEngine, cache_correct
from .engine_vanilla import VanillaEngine
from .imgfmt import FormatError, ImageHeader, decode_header, encode_header, pack_entry, translate, unpack_entry
from .l2cache import CacheFullError, L2Cache, SliceKey
from .metrics import IoCounters, LatencyModelParams, predict_avg_cost, predict_snapshot_size

__version__ = "0.1.0"
