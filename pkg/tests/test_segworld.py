from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import check_gradients
from schedlab.policy import ClassRanking
from schedlab.segworld import (
    EvalReport,
    MixMask,
    Scene,
    SegLossReport,
    ToyLearner,
    WorldConfig,
    WorldTelemetry,
    build_mix_mask,
    default_long_tail,
    evaluate,
    generate_scene,
    mix_pair,
    per_class_cross_entropy,
    seg_loss_and_update,
    _cross_entropy,
)
from schedlab.statecodec import ClassStatistics, assemble_state


def ranking_of(order) -> ClassRanking:
    return ClassRanking(order=tuple(order), log_prob=-1.0,
                        logits=np.zeros(len(order)))


def small_cfg(**overrides) -> WorldConfig:
    defaults = dict(num_classes=4, feature_dim=3, height=8, width=8,
                    noise=0.2, rectangles=4)
    defaults.update(overrides)
    return WorldConfig(**defaults)


# ---------------------------------------------------------------------------
# scene generation


def test_fixed_seed_scenes_are_bit_identical():
    cfg = small_cfg()
    first = generate_scene(cfg, np.random.default_rng(5))
    second = generate_scene(cfg, np.random.default_rng(5))
    assert np.array_equal(first.source_features, second.source_features)
    assert np.array_equal(first.source_labels, second.source_labels)
    assert np.array_equal(first.target_features, second.target_features)
    assert np.array_equal(first.target_labels, second.target_labels)


def test_noiseless_features_equal_class_means():
    cfg = small_cfg(noise=0.0, severity=0.0)
    scene = generate_scene(cfg, np.random.default_rng(6))
    source_means, target_means = cfg.class_means()
    for i in range(cfg.height):
        for j in range(cfg.width):
            assert np.array_equal(scene.source_features[:, i, j],
                                  source_means[scene.source_labels[i, j]])
            assert np.array_equal(scene.target_features[:, i, j],
                                  target_means[scene.target_labels[i, j]])


def test_degenerate_weights_yield_single_class_scene():
    cfg = WorldConfig(num_classes=2, feature_dim=2, height=6, width=6,
                      frequency_weights=(1.0, 0.0))
    scene = generate_scene(cfg, np.random.default_rng(7))
    assert np.all(scene.source_labels == 0)
    assert np.all(scene.target_labels == 0)


def test_all_zero_weights_rejected():
    with pytest.raises(ValueError, match="zero"):
        WorldConfig(num_classes=2, frequency_weights=(0.0, 0.0))


def test_severity_suppresses_the_tail():
    mild = small_cfg(severity=0.0).effective_weights()
    harsh = small_cfg(severity=1.0).effective_weights()
    # relative share of the rarest class shrinks under severity
    assert harsh[-1] / harsh[0] < mild[-1] / mild[0]


def test_default_long_tail_is_decreasing():
    weights = default_long_tail(8)
    assert all(a > b for a, b in zip(weights, weights[1:]))


# ---------------------------------------------------------------------------
# mixing masks


def test_mask_hand_example_from_four_class_ranking():
    y = np.array([[3, 1], [2, 1]])
    mask = build_mix_mask(ranking_of([3, 1, 2, 0]), y)
    assert mask.ranked_present == (3, 1, 2)
    assert mask.low_classes == (1, 2)
    assert np.array_equal(mask.mask, np.array([[0, 1], [1, 1]], dtype=np.uint8))


def test_single_class_map_masks_everything():
    y = np.zeros((3, 3), dtype=int)
    mask = build_mix_mask(ranking_of([1, 0]), y)
    assert mask.ranked_present == (0,)
    assert mask.low_classes == (0,)
    assert np.all(mask.mask == 1)


def test_mask_is_binary_and_definitional():
    rng = np.random.default_rng(8)
    for _ in range(50):
        y = rng.integers(0, 5, (6, 6))
        order = tuple(rng.permutation(5).tolist())
        mask = build_mix_mask(ranking_of(order), y)
        low = set(mask.low_classes)
        for i in range(6):
            for j in range(6):
                assert mask.mask[i, j] == (1 if y[i, j] in low else 0)


def test_low_half_size_is_ceil_of_present_count():
    rng = np.random.default_rng(9)
    for _ in range(200):
        c = int(rng.integers(1, 9))
        order = tuple(rng.permutation(c).tolist())
        present = rng.choice(c, size=int(rng.integers(1, c + 1)), replace=False)
        y = rng.choice(present, size=(4, 4))
        mask = build_mix_mask(ranking_of(order), y)
        n = len(mask.ranked_present)
        assert len(mask.low_classes) == math.ceil(n / 2)


def test_mask_matches_brute_force_recomputation():
    rng = np.random.default_rng(10)
    for _ in range(300):
        c = int(rng.integers(2, 7))
        y = rng.integers(0, c, (5, 5))
        order = tuple(rng.permutation(c).tolist())
        mask = build_mix_mask(ranking_of(order), y)

        present = {int(v) for v in np.unique(y)}
        restricted = [k for k in order if k in present]
        n = len(restricted)
        low = {restricted[k - 1] for k in range(n // 2 + 1, n + 1)}
        assert set(mask.low_classes) == low
        expected = np.zeros((5, 5), dtype=np.uint8)
        for i in range(5):
            for j in range(5):
                expected[i, j] = 1 if int(y[i, j]) in low else 0
        assert np.array_equal(mask.mask, expected)


def test_paste_high_takes_the_top_half():
    y = np.array([[3, 1], [2, 1]])
    mask = build_mix_mask(ranking_of([3, 1, 2, 0]), y, paste_half="high")
    assert mask.low_classes == (3, 1)


def test_mask_rejects_empty_map():
    with pytest.raises(ValueError, match="empty"):
        build_mix_mask(ranking_of([0, 1]), np.zeros((0, 0), dtype=int))


# ---------------------------------------------------------------------------
# mixing


def learner_for(cfg: WorldConfig) -> ToyLearner:
    return ToyLearner.initial(cfg.num_classes, cfg.feature_dim, cfg.temperature)


def test_full_mask_returns_source_pair():
    cfg = small_cfg()
    scene = generate_scene(cfg, np.random.default_rng(11))
    mask = MixMask(mask=np.ones((8, 8), dtype=np.uint8), low_classes=(0,),
                   ranked_present=(0,))
    features, labels = mix_pair(scene, mask, learner_for(cfg))
    assert np.array_equal(features, scene.source_features)
    assert np.array_equal(labels, scene.source_labels)


def test_empty_mask_returns_target_and_pseudo_labels():
    cfg = small_cfg()
    scene = generate_scene(cfg, np.random.default_rng(12))
    learner = learner_for(cfg)
    mask = MixMask(mask=np.zeros((8, 8), dtype=np.uint8), low_classes=(),
                   ranked_present=())
    features, labels = mix_pair(scene, mask, learner)
    assert np.array_equal(features, scene.target_features)
    assert np.array_equal(labels, learner.predict(scene.target_features))


def test_checkerboard_mask_matches_pixel_loop():
    cfg = small_cfg(height=2, width=2)
    scene = generate_scene(cfg, np.random.default_rng(13))
    learner = learner_for(cfg)
    board = np.indices((2, 2)).sum(axis=0) % 2
    mask = MixMask(mask=board.astype(np.uint8), low_classes=(), ranked_present=())
    features, labels = mix_pair(scene, mask, learner)
    pseudo = learner.predict(scene.target_features)
    for i in range(2):
        for j in range(2):
            if board[i, j]:
                assert np.array_equal(features[:, i, j],
                                      scene.source_features[:, i, j])
                assert labels[i, j] == scene.source_labels[i, j]
            else:
                assert np.array_equal(features[:, i, j],
                                      scene.target_features[:, i, j])
                assert labels[i, j] == pseudo[i, j]


def test_mixing_labels_follow_mask_everywhere():
    cfg = small_cfg()
    rng = np.random.default_rng(14)
    learner = learner_for(cfg)
    for _ in range(20):
        scene = generate_scene(cfg, rng)
        order = tuple(rng.permutation(cfg.num_classes).tolist())
        mask = build_mix_mask(ranking_of(order), scene.source_labels)
        _, labels = mix_pair(scene, mask, learner)
        pseudo = learner.predict(scene.target_features)
        chosen = mask.mask == 1
        assert np.array_equal(labels[chosen], scene.source_labels[chosen])
        assert np.array_equal(labels[~chosen], pseudo[~chosen])


# ---------------------------------------------------------------------------
# segmentation loss


def test_initial_prototypes_give_uniform_log_c_loss():
    cfg = small_cfg()
    scene = generate_scene(cfg, np.random.default_rng(15))
    learner = learner_for(cfg)
    mask = build_mix_mask(ranking_of(range(cfg.num_classes)),
                          scene.source_labels)
    mixed = mix_pair(scene, mask, learner)
    report = seg_loss_and_update([scene], [mixed], learner, 1.0, 1.0, 0.0)
    assert abs(report.source_ce - math.log(cfg.num_classes)) < 1e-9
    assert abs(report.mixed_ce - math.log(cfg.num_classes)) < 1e-9


def test_perfect_prototypes_at_tiny_temperature_barely_move():
    cfg = small_cfg(noise=0.0, temperature=0.01)
    scene = generate_scene(cfg, np.random.default_rng(16))
    source_means, _ = cfg.class_means()
    learner = ToyLearner(prototypes=source_means.copy(), temperature=0.01)
    mixed = (scene.source_features, scene.source_labels)
    report = seg_loss_and_update([scene], [mixed], learner, 1.0, 1.0, 0.1)
    assert report.total < 1e-6
    assert np.max(np.abs(learner.prototypes - source_means)) < 1e-6


def test_zero_mixed_weight_ignores_mixed_pair():
    cfg = small_cfg()
    rng = np.random.default_rng(17)
    scene = generate_scene(cfg, rng)
    learner_a = learner_for(cfg)
    learner_b = learner_for(cfg)
    mixed_a = (scene.target_features.copy(), scene.target_labels.copy())
    mixed_b = (rng.standard_normal(scene.target_features.shape),
               rng.integers(0, cfg.num_classes, (8, 8)))
    report_a = seg_loss_and_update([scene], [mixed_a], learner_a, 1.0, 0.0, 0.05)
    report_b = seg_loss_and_update([scene], [mixed_b], learner_b, 1.0, 0.0, 0.05)
    assert report_a.total == report_b.total
    assert np.array_equal(learner_a.prototypes, learner_b.prototypes)


def test_seg_loss_is_nonnegative():
    cfg = small_cfg()
    rng = np.random.default_rng(18)
    learner = learner_for(cfg)
    for _ in range(10):
        scene = generate_scene(cfg, rng)
        order = tuple(rng.permutation(cfg.num_classes).tolist())
        mask = build_mix_mask(ranking_of(order), scene.source_labels)
        mixed = mix_pair(scene, mask, learner)
        report = seg_loss_and_update([scene], [mixed], learner, 1.0, 1.0, 0.05)
        assert report.total >= 0.0


def test_cross_entropy_gradient_matches_finite_differences():
    cfg = small_cfg(height=3, width=3)
    scene = generate_scene(cfg, np.random.default_rng(19))
    protos = np.random.default_rng(20).uniform(-0.5, 0.5,
                                               (cfg.num_classes, cfg.feature_dim))

    def loss(tensors):
        src = _cross_entropy(scene.source_features, scene.source_labels,
                             tensors[0], cfg.temperature)
        return src

    check_gradients(loss, [protos])


def test_training_on_source_improves_source_fit():
    cfg = small_cfg(noise=0.1)
    rng = np.random.default_rng(21)
    learner = learner_for(cfg)
    first = None
    for _ in range(30):
        scene = generate_scene(cfg, rng)
        mixed = (scene.source_features, scene.source_labels)
        report = seg_loss_and_update([scene], [mixed], learner, 1.0, 0.0, 0.5)
        if first is None:
            first = report.source_ce
    assert report.source_ce < 0.5 * first


# ---------------------------------------------------------------------------
# evaluation


def test_oracle_learner_scores_perfect_accuracy():
    cfg = small_cfg(noise=0.0)
    _, target_means = cfg.class_means()
    learner = ToyLearner(prototypes=target_means.copy(),
                         temperature=cfg.temperature)
    scenes = [generate_scene(cfg, np.random.default_rng(seed))
              for seed in range(3)]
    report = evaluate(learner, scenes)
    assert np.all(report.per_class_accuracy[report.present] == 1.0)
    assert report.mean_accuracy == 1.0
    assert report.accuracy_std == 0.0


def test_equal_prototypes_win_class_zero_only():
    cfg = small_cfg()
    learner = learner_for(cfg)  # all-zero prototypes tie everywhere
    scenes = [generate_scene(cfg, np.random.default_rng(22))]
    report = evaluate(learner, scenes)
    assert report.per_class_accuracy[0] == 1.0
    for c in range(1, cfg.num_classes):
        if report.present[c]:
            assert report.per_class_accuracy[c] == 0.0


def test_accuracies_stay_in_unit_interval():
    cfg = small_cfg()
    rng = np.random.default_rng(23)
    learner = ToyLearner(prototypes=rng.standard_normal((4, 3)),
                         temperature=0.5)
    scenes = [generate_scene(cfg, rng) for _ in range(4)]
    report = evaluate(learner, scenes)
    assert np.all(report.per_class_accuracy >= 0.0)
    assert np.all(report.per_class_accuracy <= 1.0)


def test_evaluate_rejects_empty_scene_list():
    with pytest.raises(ValueError, match="at least one"):
        evaluate(learner_for(small_cfg()), [])


# ---------------------------------------------------------------------------
# telemetry


def test_untrained_snapshot_matches_state_defaults():
    cfg = small_cfg()
    telemetry = WorldTelemetry(cfg.num_classes)
    stats = telemetry.snapshot(learner_for(cfg))
    expected = assemble_state(ClassStatistics.defaults(cfg.num_classes))
    assert np.array_equal(assemble_state(stats), expected)


def test_single_mix_event_exposure_fractions():
    telemetry = WorldTelemetry(3)
    mask = MixMask(mask=np.ones((2, 2), dtype=np.uint8), low_classes=(1,),
                   ranked_present=(1,))
    telemetry.update_exposure([mask])
    stats = telemetry.snapshot(ToyLearner.initial(3, 2, 0.5))
    assert stats.exposure.tolist() == [0.0, 1.0, 0.0]


def test_entropy_field_matches_brute_force_loop():
    cfg = small_cfg()
    rng = np.random.default_rng(24)
    learner = ToyLearner(prototypes=rng.standard_normal((4, 3)),
                         temperature=0.7)
    scene = generate_scene(cfg, rng)
    telemetry = WorldTelemetry(cfg.num_classes)
    telemetry.update_target(learner, [scene])

    probs = learner.probabilities(scene.target_features)
    sums = np.zeros(4)
    counts = np.zeros(4)
    for i in range(cfg.height):
        for j in range(cfg.width):
            p = probs[:, i, j]
            c = int(p.argmax())
            sums[c] += -(p * np.log(p)).sum()
            counts[c] += 1
    for c in range(4):
        if counts[c]:
            assert abs(telemetry.entropy[c] - sums[c] / counts[c]) < 1e-10


def test_unexposed_classes_keep_zero_counters():
    telemetry = WorldTelemetry(4)
    masks = [MixMask(mask=np.ones((1, 1), dtype=np.uint8),
                     low_classes=(0, 2), ranked_present=(0, 2))] * 5
    telemetry.update_exposure(masks)
    assert telemetry.exposure_counts[1] == 0
    assert telemetry.exposure_counts[3] == 0
    stats = telemetry.snapshot(ToyLearner.initial(4, 2, 0.5))
    assert stats.exposure[1] == 0.0


def test_per_class_cross_entropy_flags_observed_classes():
    cfg = WorldConfig(num_classes=3, feature_dim=2, height=4, width=4,
                      frequency_weights=(1.0, 1.0, 0.0))
    scene = generate_scene(cfg, np.random.default_rng(25))
    learner = ToyLearner.initial(3, 2, 0.5)
    per_class, observed = per_class_cross_entropy([scene], learner)
    assert not observed[2]
    assert per_class[2] == 0.0
    for c in range(2):
        if observed[c]:
            assert abs(per_class[c] - math.log(3)) < 1e-9
