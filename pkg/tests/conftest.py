import os

import numpy as np
import pytest

from actspec.features import FEATURE_NAMES, SpectralDescriptor
from actspec.monitor import DescriptorSeries


@pytest.fixture(autouse=True, scope="session")
def isolated_quantile_cache(tmp_path_factory):
    """Point the MP quantile JSON cache at a session-local directory."""
    cache_dir = tmp_path_factory.mktemp("actspec-cache")
    old = os.environ.get("ACTSPEC_CACHE_DIR")
    os.environ["ACTSPEC_CACHE_DIR"] = str(cache_dir)
    # the cache module memoizes the file contents; reset so the env var is used
    import actspec.rmt as rmt

    rmt._QUANTILE_CACHE = None
    yield cache_dir
    if old is None:
        os.environ.pop("ACTSPEC_CACHE_DIR", None)
    else:
        os.environ["ACTSPEC_CACHE_DIR"] = old


def series_from_matrix(mat, label="factual", window_len=4, trace_id="t", meta=None):
    """Build a DescriptorSeries directly from a (steps, 10) feature matrix."""
    steps = [
        SpectralDescriptor(**{n: float(v) for n, v in zip(FEATURE_NAMES, row)})
        for row in np.asarray(mat, dtype=float)
    ]
    return DescriptorSeries(
        trace_id=trace_id,
        label=label,
        steps=steps,
        window_len=window_len,
        meta=dict(meta or {}),
    )
