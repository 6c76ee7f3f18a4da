import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from diffkillr.benchmarks import ellipse_archetypes
from diffkillr.errors import ConfigError, DimensionError, ParameterError
from diffkillr.patch_bank import CellBank, WholeImage
from diffkillr.pipeline import (Detection, PipelineConfig, hard_example_mining, instance_metrics, match_detections,
                                nms, predict_orientation, scan_count, segment_few_shot)
from diffkillr.synth import ShapeSpec, gen_scene, gen_shape


def greedy_oracle(points, scores, radius):
    """Straightforward restatement: take the best remaining, drop its neighbours, repeat."""
    left = list(range(len(points)))
    kept = []
    while left:
        best = min(left, key=lambda k: (-scores[k], points[k][0], points[k][1]))
        kept.append(best)
        left = [k for k in left if k != best and math.dist(points[k], points[best]) > radius]
    return kept


# nms --------------------------------------------------------------------


def test_nms_single_candidate():
    assert nms(np.array([[3.0, 4.0]]), np.array([0.7]), 5.0).tolist() == [0]


def test_nms_keeps_the_better_of_a_close_pair():
    pts = np.array([[0.0, 0.0], [1.0, 0.0]])
    assert nms(pts, np.array([0.6, 0.9]), 2.0).tolist() == [1]
    assert nms(pts, np.array([0.6, 0.9]), 0.5).tolist() == [1, 0]


def test_nms_breaks_score_ties_by_position():
    pts = np.array([[5.0, 0.0], [4.0, 0.0]])
    assert nms(pts, np.array([0.8, 0.8]), 2.0).tolist() == [1]


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), radius=st.floats(1.0, 30.0))
def test_nms_matches_oracle(seed, radius):
    r = np.random.default_rng(seed)
    pts = r.integers(0, 40, (50, 2)).astype(float)
    scores = r.integers(0, 5, 50) / 5.0  # plenty of ties
    assert nms(pts, scores, radius).tolist() == greedy_oracle(pts.tolist(), scores.tolist(), radius)


def test_nms_is_idempotent(rng):
    pts, sc = rng.random((40, 2)) * 50, rng.random(40)
    kept = nms(pts, sc, 8.0)
    again = nms(pts[kept], sc[kept], 8.0)
    assert kept[again].tolist() == kept.tolist()


def test_raising_the_threshold_only_filters(rng):
    # candidates below the threshold come last in the visit order, so they never suppress anything kept
    pts, sc = rng.random((60, 2)) * 80, rng.random(60)
    low = np.flatnonzero(sc > 0.2)
    kept_low = low[nms(pts[low], sc[low], 10.0)]
    high = np.flatnonzero(sc > 0.6)
    kept_high = high[nms(pts[high], sc[high], 10.0)]
    assert kept_high.tolist() == [k for k in kept_low if sc[k] > 0.6]


def test_nms_rejects_nonfinite():
    with pytest.raises(ParameterError):
        nms(np.zeros((1, 2)), np.array([np.nan]), 1.0)


# matching ---------------------------------------------------------------


def test_match_detections_is_one_to_one_and_closest_first():
    pred = np.array([[0.0, 0.0], [3.0, 0.0]])
    truth = np.array([[1.0, 0.0], [10.0, 0.0]])
    assert match_detections(pred, truth, 5.0) == [(0, 0)]
    assert match_detections(pred, truth, 8.0) == [(0, 0), (1, 1)]
    assert match_detections(np.zeros((0, 2)), truth, 5.0) == []


def test_config_defaults_and_validation():
    cfg = PipelineConfig()
    assert (cfg.stride, cfg.nms_radius, cfg.match_radius, cfg.refine_radius) == (8, 24.0, 16.0, 4)
    for bad in ({"stride": 0}, {"hard_mining_ratio": 1.5}, {"refine_top_k": 0}, {"refine_radius": -1}):
        with pytest.raises(ConfigError):
            PipelineConfig(**bad)


# counting ---------------------------------------------------------------


@pytest.mark.slow
def test_blank_image_has_no_cells(encoder, embedded_bank):
    res = scan_count(WholeImage(np.full((96, 96), 0.1), centroids=np.zeros((0, 2))), encoder, embedded_bank)
    assert res.detections == [] and res.precision == 1.0 and res.recall == 1.0


@pytest.mark.slow
def test_scan_errors(encoder, embedded_bank):
    with pytest.raises(DimensionError):
        scan_count(WholeImage(np.zeros((16, 16))), encoder, embedded_bank)
    with pytest.raises(ConfigError):
        scan_count(WholeImage(np.zeros((64, 64))), encoder, CellBank(embedded_bank.entries))


@pytest.mark.slow
def test_grid_scene_counts_every_cell(encoder, embedded_bank, shapes):
    res = scan_count(gen_scene(shapes, 9, "grid", seed=0).image, encoder, embedded_bank)
    assert len(res.detections) == 9 and res.f1 == 1.0


@pytest.mark.slow
def test_refinement_pulls_detections_onto_cells(encoder, embedded_bank, shapes):
    img = gen_scene(shapes, 9, "grid", seed=0).image
    coarse = scan_count(img, encoder, embedded_bank, PipelineConfig(refine_radius=0))
    assert all(c % 8 == 4 for d in coarse.detections for c in d.center)
    fine = scan_count(img, encoder, embedded_bank)

    def err(res):
        return np.mean([np.linalg.norm(img.centroids - d.center, axis=1).min() for d in res.detections])

    assert err(fine) < 2.0 < err(coarse)


# orientation ------------------------------------------------------------


@pytest.mark.slow
def test_archetype_query_has_no_orientation_error(orientation_models):
    bank, enc, mappers = orientation_models(0)
    queries = [e.patch for e in bank.entries]
    res = predict_orientation(queries, enc, mappers[0.25], bank, truths=[e.labels for e in bank.entries])
    assert res.metrics["angle_error"] < 2.0


@pytest.mark.slow
def test_rotated_ellipse_orientation(orientation_models):
    bank, enc, mappers = orientation_models(0)
    s = ellipse_archetypes()[0]
    patch, labels = gen_shape(ShapeSpec("ellipse", a=s.a, b=s.b, angle=math.radians(30), foreground=s.foreground,
                                        background=s.background, texture=s.texture), 32, seed=3)
    res = predict_orientation([patch], enc, mappers[0.25], bank, truths=[labels])
    assert res.metrics["angle_error"] < 5.0


@pytest.mark.slow
def test_orientation_needs_orientation_labels(encoder, mapper, embedded_bank):
    # squares and stars carry no orientation channel
    with pytest.raises(ConfigError):
        predict_orientation([embedded_bank.entries[0].patch], encoder, mapper, embedded_bank)


# segmentation -----------------------------------------------------------


def test_instance_metrics_of_perfect_prediction():
    truth = np.zeros((10, 10), int)
    truth[1:4, 1:4], truth[6:9, 5:9] = 1, 2
    m = instance_metrics(truth * 7, truth)
    assert m["instance_dice"] == 1.0 and m["semantic_iou"] == 1.0 and m["instances"] == 2


@pytest.mark.slow
def test_archetype_cell_is_segmented(encoder, mapper, embedded_bank):
    e = embedded_bank.entries[0]
    img = WholeImage(e.patch.intensities[..., 0], instances=(e.labels.mask() > 0).astype(int))
    res = segment_few_shot(img, encoder, mapper, embedded_bank, detections=[Detection((16.0, 16.0), 1.0, 0)])
    assert res.metrics["instance_dice"] >= 0.95


@pytest.mark.slow
def test_grid_scene_segmentation(encoder, mapper, embedded_bank, shapes):
    scene = gen_scene(shapes, 9, "grid", seed=0)
    res = segment_few_shot(scene.image, encoder, mapper, embedded_bank)
    assert res.metrics["instance_dice"] >= 0.9
    assert res.metrics["instances"] == len(res.detections) == 9


# hard-example mining ----------------------------------------------------


def test_uniform_sampling_at_rho_zero():
    s = hard_example_mining(10, 0.0, batch_size=100, seed=0)
    counts = np.bincount(np.concatenate([s.sample() for _ in range(100)]), minlength=10)
    assert counts.sum() == 10_000
    assert stats.chisquare(counts).pvalue > 0.001


def test_rho_one_draws_only_hard_items():
    s = hard_example_mining(20, 1.0, batch_size=8, seed=0, hard_quantile=0.25)
    s.update(range(20), np.arange(20.0))
    assert set(s.hard_set().tolist()) == {15, 16, 17, 18, 19}
    for _ in range(20):
        assert set(s.sample().tolist()) <= {15, 16, 17, 18, 19}


def test_unseen_items_count_as_hard():
    s = hard_example_mining(8, 1.0, batch_size=4, hard_quantile=0.25)
    s.update(range(6), np.full(6, 100.0))
    assert s.hard_set().tolist() == [6, 7]


def test_mixed_batches_have_the_right_split():
    s = hard_example_mining(100, 0.25, batch_size=16, seed=0)
    s.update(range(100), np.arange(100.0))
    b = s.sample()
    assert len(b) == 16 and np.all(b[:4] >= 75)


@pytest.mark.parametrize("rho", [-0.1, 1.1])
def test_rho_must_be_a_fraction(rho):
    with pytest.raises(ParameterError):
        hard_example_mining(4, rho)
