import functools
import time

import numpy as np
import pytest

from dem.evolution import LoopConfig, run_dem, source_only_baseline
from dem.synth_domains import ShiftSpec, generate_domain_pair

ROTATED = {"rotation_angle": float(np.pi / 2), "label_flip_rate": 0.1}


def tiny_config(**kw) -> LoopConfig:
    """A loop budget small enough for unit tests."""
    base = dict(screening_iterations=3, evolving_iterations=3, actions_per_iteration=3, action_epochs=1,
                pretrain_max_epochs=10, pretrain_patience=5, bootstrap_resamples=100, hidden_dims=(16, 8))
    base.update(kw)
    return LoopConfig(**base)


@pytest.fixture(scope="session")
def small_pair():
    return generate_domain_pair(ShiftSpec(n_source=300, n_target=300, seed=5, **ROTATED))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- shared benchmark runs ----------------------------------------------------------
# Full-size runs are expensive, so every module that needs them shares one cache.

BENCH_SEEDS = tuple(range(5))
VARIANTS = {"DEM": {}, "RL": {"framework": "rl"}, "scratch": {"warm_start": False}, "RF": {"calibration": False}}


@functools.lru_cache(maxsize=None)
def benchmark_pair(seed, rotated=True):
    return generate_domain_pair(ShiftSpec(seed=seed, **(ROTATED if rotated else {})))


def _timed(fn, *args):
    start = time.perf_counter()
    out = fn(*args)
    return dict(out, seconds=time.perf_counter() - start)


@functools.lru_cache(maxsize=None)
def benchmark_run(variant, seed, rotated=True):
    """``run_dem`` metrics for one variant and seed on the default benchmark size."""
    config = LoopConfig(seed=seed, **VARIANTS[variant])
    return _timed(lambda: run_dem(*benchmark_pair(seed, rotated), config).metrics)


@functools.lru_cache(maxsize=None)
def source_only_run(seed, rotated=True):
    return _timed(lambda: source_only_baseline(*benchmark_pair(seed, rotated), LoopConfig(seed=seed)))
