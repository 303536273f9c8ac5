"""
File formats for catalogs, popularity, traces, acceptance tables and configs
"""
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np
import pandas as pd

from models import Catalog, PopularityModel, Trace
from services.catalog import CatalogService
from services.exceptions import MissingTimestampsError, ValidationError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _require(path: PathLike) -> Path:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"File not found: {path}", path=str(path))
    return path


def read_catalog_csv(path: PathLike) -> Catalog:
    """CSV `id,x0,x1,...`; ids must be exactly 0..N-1 in any order"""
    frame = pd.read_csv(_require(path))
    if 'id' not in frame.columns or len(frame.columns) < 2:
        raise ValidationError('Catalog CSV needs an id column and at least one coordinate', path=str(path))
    frame = frame.sort_values('id')
    ids = frame['id'].to_numpy()
    if not np.array_equal(ids, np.arange(len(frame))):
        raise ValidationError('Catalog ids must be dense and unique', path=str(path))
    coords = frame.drop(columns=['id'])
    if coords.isna().any().any():
        raise ValidationError('Catalog has missing coordinates', path=str(path))
    logger.info(f"Loaded catalog of {len(frame)} items, dimension {coords.shape[1]} from {path}")
    return Catalog(embeddings=coords.to_numpy(dtype=float))


def write_catalog_csv(catalog: Catalog, path: PathLike) -> None:
    frame = pd.DataFrame(catalog.embeddings, columns=[f"x{i}" for i in range(catalog.dimension)])
    frame.insert(0, 'id', np.arange(len(catalog)))
    frame.to_csv(path, index=False)


def read_popularity_csv(path: PathLike, n_items: int) -> PopularityModel:
    """CSV `id,weight`; items absent from the file get weight 0"""
    frame = pd.read_csv(_require(path))
    if not {'id', 'weight'} <= set(frame.columns):
        raise ValidationError('Popularity CSV needs id and weight columns', path=str(path))
    ids = frame['id'].to_numpy(dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= n_items):
        raise ValidationError('Popularity file references ids outside the catalog', path=str(path))
    weights = np.zeros(n_items)
    np.add.at(weights, ids, frame['weight'].to_numpy(dtype=float))
    return CatalogService.popularity_from_weights(weights)


def read_trace(path: PathLike) -> Trace:
    """
    Newline-delimited ids, or CSV with header `id,timestamp`; gzip is inferred
    from the file extension.
    """
    path = _require(path)
    head = pd.read_csv(path, nrows=1, header=None, compression='infer', dtype=str)
    if head.empty:
        raise ValidationError('Trace file is empty', path=str(path))
    if not str(head.iloc[0, 0]).strip().lstrip('-').isdigit():
        frame = pd.read_csv(path, compression='infer')
        if 'id' not in frame.columns:
            raise ValidationError('Trace CSV needs an id column', path=str(path))
        timestamps = frame['timestamp'].to_numpy(dtype=float) if 'timestamp' in frame.columns else None
        requests = frame['id'].to_numpy(dtype=np.int64)
    else:
        frame = pd.read_csv(path, header=None, compression='infer')
        requests = frame.iloc[:, 0].to_numpy(dtype=np.int64)
        timestamps = frame.iloc[:, 1].to_numpy(dtype=float) if frame.shape[1] > 1 else None
    if timestamps is not None and np.any(np.diff(timestamps) < 0):
        raise ValidationError('Trace timestamps must be nondecreasing', path=str(path))
    logger.info(f"Loaded trace of {len(requests)} requests from {path}")
    return Trace(requests=requests, timestamps=timestamps)


def require_timestamps(trace: Trace) -> Trace:
    if trace.timestamps is None:
        raise MissingTimestampsError('This operation needs a trace with timestamps')
    return trace


def write_trace(trace: Trace, path: PathLike) -> None:
    """Ids one per line, or `id,timestamp` CSV when timestamps are present"""
    if trace.timestamps is not None:
        frame = pd.DataFrame({'id': trace.requests, 'timestamp': trace.timestamps})
        frame.to_csv(path, index=False, float_format='%.9f', compression='infer')
    else:
        pd.DataFrame({'id': trace.requests}).to_csv(path, index=False, header=False, compression='infer')


def read_q_table(path: PathLike) -> List[Tuple[int, int, float]]:
    """CSV `server,requester,q`"""
    frame = pd.read_csv(_require(path))
    if not {'server', 'requester', 'q'} <= set(frame.columns):
        raise ValidationError('Acceptance table needs server, requester and q columns', path=str(path))
    return list(zip(frame['server'].astype(int), frame['requester'].astype(int), frame['q'].astype(float)))


def load_experiment_config(path: PathLike) -> Dict[str, Any]:
    """TOML (or JSON by extension) mapping mirroring ExperimentConfig fields"""
    path = _require(path)
    if path.suffix == '.json':
        return json.loads(path.read_text())
    with path.open('rb') as handle:
        data = tomllib.load(handle)
    return data.get('experiment', data)
