"""Field-granular tiered object storage."""
from tierstore.durable import DurableArray, DurableMap
from tierstore.placement import PlacementProblem, PlacementSolution, brute_force, objective, solve
from tierstore.schema import ObjectSchema, compute_layout, parse_schema
from tierstore.store import ObjectRef, Store
from tierstore.tiers import TierConfig, decode_handle, encode_handle, open_tier

__version__ = "0.1.0"

__all__ = [
    "DurableArray",
    "DurableMap",
    "ObjectRef",
    "ObjectSchema",
    "PlacementProblem",
    "PlacementSolution",
    "Store",
    "TierConfig",
    "brute_force",
    "compute_layout",
    "decode_handle",
    "encode_handle",
    "objective",
    "open_tier",
    "parse_schema",
    "solve",
]
