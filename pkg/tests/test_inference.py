"""Resampled and chunked prediction."""

import numpy as np
import pytest

from flow3d.core import PointCloud, derive_seed, rng_from
from flow3d.inference import ChunkSpec, predict_chunked, predict_resampled
from flow3d.model import (default_model_spec, forward, init_model_params,
                          trainable_arrays)


def _setup(rng, n1=16, n2=18, extent=0.5):
    spec = default_model_spec(width_scale=0.1)
    params = init_model_params(spec, int(rng.integers(1 << 31)))
    for _, arr in trainable_arrays(params):
        if arr.ndim == 1:
            arr += rng.normal(scale=0.05, size=arr.shape)
    f1 = PointCloud(rng.uniform(-extent, extent, size=(n1, 3)))
    f2 = PointCloud(rng.uniform(-extent, extent, size=(n2, 3)))
    return spec, params, f1, f2


def test_chunk_spec_validation():
    with pytest.raises(ValueError):
        ChunkSpec(edge=5.0, stride=0.0)
    with pytest.raises(ValueError):
        ChunkSpec(edge=2.0, stride=3.0)


def test_runs_one_equals_plain_forward(rng):
    spec, params, f1, f2 = _setup(rng)
    flow, iso = predict_resampled(spec, params, f1, f2, runs=1, seed=4)
    ref, _, ref_iso = forward(spec, params.copy(), f1, f2, "infer",
                              derive_seed(4, 0))
    np.testing.assert_array_equal(flow.vectors, ref.vectors)
    np.testing.assert_array_equal(iso, ref_iso)


def test_runs_must_be_positive(rng):
    spec, params, f1, f2 = _setup(rng)
    with pytest.raises(ValueError):
        predict_resampled(spec, params, f1, f2, runs=0)


def test_resampling_is_mean_of_runs(rng):
    spec, params, f1, f2 = _setup(rng)
    flow, _ = predict_resampled(spec, params, f1, f2, runs=4, seed=9)
    singles = [predict_resampled(spec, params, f1, f2, runs=1,
                                 seed=derive_seed(9, 0))[0].vectors]
    # manual mean with per-run derived seeds
    total = np.zeros_like(flow.vectors)
    for k in range(4):
        one, _, _ = forward(spec, params.copy(), f1, f2, "infer",
                            derive_seed(9, k))
        total += one.vectors
    np.testing.assert_allclose(flow.vectors, total / 4, rtol=1e-12, atol=0)


def test_resampling_leaves_running_stats_untouched(rng):
    spec, params, f1, f2 = _setup(rng)
    before = [bn.running_mean.copy()
              for m in params.mlps.values() for bn in m.batchnorms
              if bn is not None]
    predict_resampled(spec, params, f1, f2, runs=3, seed=1)
    after = [bn.running_mean
             for m in params.mlps.values() for bn in m.batchnorms
             if bn is not None]
    for b, a in zip(before, after):
        np.testing.assert_array_equal(b, a)


def test_resampling_reduces_prediction_variance(rng):
    spec, params, f1, f2 = _setup(rng, n1=24, n2=24)
    var = {}
    for runs in (1, 10):
        preds = [predict_resampled(spec, params, f1, f2, runs=runs,
                                   seed=s)[0].vectors for s in range(8)]
        var[runs] = float(np.var(np.stack(preds), axis=0).mean())
    assert var[10] < var[1]


def test_single_chunk_equals_resampled(rng):
    spec, params, f1, f2 = _setup(rng, extent=0.5)
    chunk = ChunkSpec(edge=5.0, stride=5.0, jitter_sigma=0.0)
    flow_c, iso_c = predict_chunked(spec, params, f1, f2, chunk, runs=2,
                                    seed=3)
    flow_r, _ = predict_resampled(spec, params, f1, f2, runs=2,
                                  seed=derive_seed(3, 1, 0))
    np.testing.assert_array_equal(flow_c.vectors, flow_r.vectors)


def test_chunk_overlap_averages(rng):
    # two XY cells whose windows overlap: points in the overlap get the mean
    spec, params, _, _ = _setup(rng)
    p1 = np.concatenate([rng.uniform(-0.4, 0.4, size=(20, 2)),
                         rng.uniform(-0.2, 0.2, size=(20, 1))], axis=1)
    f1 = PointCloud(p1)
    f2 = PointCloud(p1 + rng.normal(scale=0.02, size=p1.shape))
    chunk = ChunkSpec(edge=1.2, stride=0.5, jitter_sigma=0.0)
    flow, iso = predict_chunked(spec, params, f1, f2, chunk, runs=1, seed=8)
    assert np.isfinite(flow.vectors).all()
    assert not iso.all()


def test_chunk_coverage_audit(rng):
    # wide scene: every frame-1 point must fall in at least one chunk with
    # the default spec (jitter off keeps the grid aligned)
    spec, params, _, _ = _setup(rng)
    p1 = np.concatenate([rng.uniform(-10, 10, size=(300, 2)),
                         rng.uniform(-0.3, 0.3, size=(300, 1))], axis=1)
    f1 = PointCloud(p1)
    f2 = PointCloud(p1 + rng.normal(scale=0.05, size=p1.shape))
    chunk = ChunkSpec(jitter_sigma=0.0)
    flow, iso = predict_chunked(spec, params, f1, f2, chunk, runs=1, seed=0)
    lo = p1[:, :2].min(axis=0)
    covered = np.zeros(len(f1), dtype=bool)
    for cx in np.arange(lo[0], p1[:, 0].max() + chunk.stride, chunk.stride):
        for cy in np.arange(lo[1], p1[:, 1].max() + chunk.stride, chunk.stride):
            inside = np.all(np.abs(p1[:, :2] - [cx, cy]) <= chunk.edge / 2,
                            axis=1)
            covered |= inside
    assert covered.all()
    assert np.isfinite(flow.vectors).all()


def test_chunk_lattice_translation_consistency(rng):
    spec, params, _, _ = _setup(rng)
    step = 2.0 ** -10
    p1 = rng.integers(-400, 400, size=(60, 3)).astype(np.float64) * step
    p2 = rng.integers(-400, 400, size=(60, 3)).astype(np.float64) * step
    f1, f2 = PointCloud(p1), PointCloud(p2)
    chunk = ChunkSpec(edge=1.0, stride=0.5, jitter_sigma=0.0)
    t = np.array([1.0, 0.5, 0.0])  # lattice vector: multiples of the stride
    a, iso_a = predict_chunked(spec, params, f1, f2, chunk, runs=1, seed=6)
    b, iso_b = predict_chunked(spec, params,
                               PointCloud(p1 + t), PointCloud(p2 + t),
                               chunk, runs=1, seed=6)
    np.testing.assert_array_equal(a.vectors, b.vectors)
    np.testing.assert_array_equal(iso_a, iso_b)
