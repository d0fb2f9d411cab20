"""Pool-based model exchange: binary format, storage, HTTP service and client."""
from .blob import content_id, deserialize, load_model, model_kind, save_model, serialize
from .client import PoolAggregate, PoolClient, aggregate_from_pool
from .server import ENV_ADDR, PoolServer, serve
from .store import PoolStore

__all__ = [
    "ENV_ADDR", "PoolAggregate", "PoolClient", "PoolServer", "PoolStore", "aggregate_from_pool",
    "content_id", "deserialize", "load_model", "model_kind", "save_model", "serialize", "serve",
]
