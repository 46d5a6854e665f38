import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowvad.errors import ConfigError, DegenerateStatisticsError, ShapeError, UndefinedMetricError
from flowvad.scoring import (
    DUMP_KEYS,
    FUSION_WEIGHTS,
    ScoreStats,
    auroc,
    fit_stats,
    frame_scores,
    fuse,
    median_smooth,
    minmax,
    per_video_auroc,
    pool_video,
    pred_error,
    read_score_dump,
    recon_error,
    write_score_dump,
)


def _pairwise_auroc(s, y):
    """Mann-Whitney oracle: fraction of (pos, neg) pairs ordered correctly, ties 1/2."""
    pos, neg = s[y == 1], s[y == 0]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0) + 0.5 * (diff == 0)).mean())


def _loop_median(x, window):
    half = window // 2
    out = []
    for i in range(len(x)):
        vals = [x[min(max(j, 0), len(x) - 1)] for j in range(i - half, i + half + 1)]
        out.append(sorted(vals)[half])
    return np.array(out)


def test_cue_examples():
    assert recon_error([1.0, 0.0], [0.0, 0.0]) == 0.5
    assert pred_error(np.ones((2, 3)), np.ones((2, 3))) == 0.0
    per = recon_error(torch.ones(3, 2, 2), torch.zeros(3, 2, 2), batched=True)
    assert per.tolist() == [1.0, 1.0, 1.0]
    with pytest.raises(ShapeError):
        pred_error(np.zeros(3), np.zeros(4))


def test_fit_stats_population():
    stats = fit_stats([1.0, 3.0], [1.0, 3.0])
    assert (stats.mu_r, stats.sigma_r, stats.mu_p, stats.sigma_p) == (2.0, 1.0, 2.0, 1.0)
    assert stats.train_min == -2.0


def test_fuse_examples():
    stats = ScoreStats(2.0, 1.0, 1.0, 0.5, w_r=1.0, w_p=0.1)
    assert fuse(3.0, 2.0, stats) == pytest.approx(1.0 + 0.1 * 2.0)
    equal = ScoreStats(0.0, 1.0, 0.0, 1.0)
    assert fuse(2.0, 0.0, equal) == 2.0
    out = fuse(np.array([0.0, 1.0]), np.array([0.0, 1.0]), equal)
    assert out.tolist() == [0.0, 2.0]


def test_degenerate_stats():
    with pytest.raises(DegenerateStatisticsError):
        fit_stats([1.0, 1.0], [1.0, 2.0])
    with pytest.raises(DegenerateStatisticsError):
        fit_stats([1.0], [2.0])
    with pytest.raises(DegenerateStatisticsError):
        ScoreStats(0.0, 0.0, 0.0, 1.0)


def test_stats_roundtrip():
    stats = fit_stats([0.1, 0.4, 0.2], [1.0, 0.5, 0.7], 0.05, 1.0)
    assert ScoreStats.from_dict(stats.to_dict()) == stats


def test_fusion_weight_table():
    assert FUSION_WEIGHTS == {"ped2": (1.0, 0.1), "avenue": (0.05, 1.0), "shanghaitech": (0.02, 1.0)}


def test_frame_pooling():
    assert frame_scores([[0.1, 0.7], [], [0.3]], -1.0).tolist() == [0.7, -1.0, 0.3]
    out = pool_video([4, 4, 6], [0.2, 0.5, 0.1], n_frames=8, t=4, empty_value=-9.0)
    assert out.tolist() == [0.5, -9.0, 0.1, -9.0]
    with pytest.raises(ShapeError):
        pool_video([3], [0.1], n_frames=8, t=4, empty_value=0.0)


def test_median_examples():
    assert median_smooth([0, 0, 5, 0, 0], 3).tolist() == [0, 0, 0, 0, 0]
    assert median_smooth([1, 2, 3], 1).tolist() == [1, 2, 3]
    # edge replication: [9, 9 | 9, 1, 1 | 1, 1]
    assert median_smooth([9, 1, 1], 5).tolist() == [9, 1, 1]
    with pytest.raises(ConfigError):
        median_smooth([1, 2], 4)
    assert median_smooth([], 17).size == 0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=60), st.sampled_from([1, 3, 5, 17]))
def test_median_matches_sorting_oracle(x, window):
    assert np.allclose(median_smooth(x, window), _loop_median(x, window))


def test_auroc_examples():
    assert auroc([0.1, 0.9], [0, 1]) == 1.0
    assert auroc([0.9, 0.1], [0, 1]) == 0.0
    assert auroc([0.5, 0.5], [0, 1]) == 0.5
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [0, 2])
    with pytest.raises(ShapeError):
        auroc([0.1], [0, 1])


def test_auroc_pairwise_oracle_1000():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 1000)
    s = np.round(rng.normal(size=1000) + 0.7 * y, 1)  # rounding creates ties
    assert auroc(s, y) == pytest.approx(_pairwise_auroc(s, y), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 80))
def test_auroc_invariants(seed, n):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = rng.integers(-5, 5, n).astype(float)
    a = auroc(s, y)
    assert 0.0 <= a <= 1.0
    assert a == pytest.approx(_pairwise_auroc(s, y), abs=1e-12)
    # strictly increasing transforms keep the value; negation mirrors it
    assert auroc(np.exp(s) * 3 + 1, y) == pytest.approx(a, abs=1e-12)
    assert auroc(-s, y) == pytest.approx(1 - a, abs=1e-12)


def test_per_video_auroc():
    out = per_video_auroc({"a": ([0.1, 0.9], [0, 1]), "b": ([0.3, 0.2], [0, 0])})
    assert out == {"a": 1.0, "b": None}


def test_minmax():
    assert minmax([2.0, 4.0, 3.0]).tolist() == [0.0, 1.0, 0.5]
    assert minmax([5.0, 5.0]).tolist() == [0.0, 0.0]


def test_score_dump_roundtrip(tmp_path):
    recs = [
        dict(video_id="v", frame_index=4, s_r=0.1, s_p=None, fused=-1.0, smoothed=-1.0, label=0, extra=1),
        dict(video_id="v", frame_index=5, s_r=0.2, s_p=0.3, fused=2.0, smoothed=0.5, label=1),
    ]
    write_score_dump(tmp_path / "s.jsonl", recs)
    back = read_score_dump(tmp_path / "s.jsonl")
    assert [tuple(r) for r in back] == [DUMP_KEYS, DUMP_KEYS]
    assert back[0]["s_p"] is None and back[1]["fused"] == 2.0
