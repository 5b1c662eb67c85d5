from collections import deque

import numpy as np
import pytest

from deform import DeformationStage
from errors import ConfigError, TrainingDivergedError
from sr_net import init_weights
from synthetic import make_benchmark_pair
from tensor_autodiff import Tensor, get_tape
from trainer import (TRAIN_PRESETS, Scheme, TrainConfig, TrainingReport, TrainState, blur_guide,
                     build_stack, displaced_pair, guide_blur_sigma, loss_plateaued,
                     lr_schedule_update, select_scheme, should_stop, stage_for_iteration, train,
                     train_step)


def tiny_config(**overrides) -> TrainConfig:
    settings = dict(patch_size=8, base_lr=1e-3, min_lr=1e-5, max_iters=6, plateau_window=5,
                    fe1_width=4, fe1_layers=3, fe2_width=4, fe2_layers=4,
                    cpab_cells=(2, 2), cpab_steps=8, tps_k=3, log_every=1)
    settings.update(overrides)
    return TrainConfig(**settings)


@pytest.fixture
def pair():
    return make_benchmark_pair(h=16, w=16, r=2, seed=3).pair


def fresh_session(config, pair):
    state = TrainState.fresh(config)
    weights = init_weights(config.fe1_config(), config.fe2_config(), state.rng)
    stack = build_stack(config)
    return state, weights, stack


# ==================== Schedule ====================

def test_scheme_selection_frequency():
    rng = np.random.default_rng(0)
    picks = [select_scheme(rng, 0.3) for _ in range(20000)]
    assert abs(picks.count(Scheme.UPSAMPLING) / len(picks) - 0.3) < 0.02
    assert all(select_scheme(rng, 0.0) is Scheme.DOWNSAMPLING for _ in range(200))
    assert all(select_scheme(rng, 1.0) is Scheme.UPSAMPLING for _ in range(200))


def test_stage_boundaries():
    config = TrainConfig(max_iters=100)
    assert stage_for_iteration(0, config) is DeformationStage.AFFINE
    assert stage_for_iteration(19, config) is DeformationStage.AFFINE
    assert stage_for_iteration(20, config) is DeformationStage.AFFINE_CPAB
    assert stage_for_iteration(49, config) is DeformationStage.AFFINE_CPAB
    assert stage_for_iteration(50, config) is DeformationStage.FULL


def test_guide_blur_fades_out_before_the_full_stage():
    config = TrainConfig(max_iters=10, guide_blur=2.0)
    assert guide_blur_sigma(0, config) == pytest.approx(2.0)
    assert guide_blur_sigma(2.5, config) == pytest.approx(1.0)
    assert guide_blur_sigma(5, config) == 0.0
    assert guide_blur_sigma(9, config) == 0.0
    assert guide_blur_sigma(0, TrainConfig(max_iters=10)) == 0.0


def test_displaced_preset_speeds_up_coarse_registration():
    config = displaced_pair(TrainConfig(seed=4, max_iters=900))
    assert config.lr_factors == {"affine": 50.0, "cpab": 2.0, "tps": 0.5}
    assert config.guide_blur == 2.0
    assert config.seed == 4 and config.max_iters == 900
    assert TRAIN_PRESETS["displaced"] is displaced_pair


def test_plateau_detection(rng):
    noisy_flat = 0.2 + rng.normal(0.0, 0.01, size=100)
    falling = np.linspace(1.0, 0.1, 100) + rng.normal(0.0, 0.001, size=100)
    assert loss_plateaued(noisy_flat, 1.5)
    assert not loss_plateaued(falling, 1.5)


def flat_state(config, lr):
    state = TrainState.fresh(config)
    state.lr = lr
    wobble = 0.01 * (-1.0) ** np.arange(config.plateau_window)
    state.losses = deque(0.3 + wobble,
                         maxlen=2 * config.plateau_window)
    state.since_decay = config.plateau_window
    return state


def test_lr_drops_tenfold_on_plateau():
    config = TrainConfig(base_lr=1e-4, min_lr=1e-6, plateau_window=20)
    state = flat_state(config, 1e-4)
    assert lr_schedule_update(state, config) == pytest.approx(1e-5)
    assert state.since_decay == 0 and state.decays == 1
    # the window must refill before the next decay
    assert lr_schedule_update(state, config) == pytest.approx(1e-5)


def test_lr_never_drops_below_minimum():
    config = TrainConfig(base_lr=1e-4, min_lr=1e-6, plateau_window=20)
    state = flat_state(config, 1e-6)
    state.decays = 2
    assert lr_schedule_update(state, config) == pytest.approx(1e-6)
    assert state.plateau_at_min


def test_lr_kept_while_loss_falls():
    config = TrainConfig(plateau_window=20)
    state = TrainState.fresh(config)
    state.losses.extend(np.linspace(1.0, 0.5, 20))
    state.since_decay = 20
    assert lr_schedule_update(state, config) == config.base_lr


def test_stop_conditions():
    config = TrainConfig(max_iters=50)
    state = TrainState.fresh(config)
    assert not should_stop(state, config)
    state.iteration = 50
    assert should_stop(state, config)

    state = TrainState.fresh(config)
    state.lr, state.plateau_at_min = config.min_lr, True
    state.stage = DeformationStage.AFFINE_CPAB
    assert not should_stop(state, config)
    state.stage = DeformationStage.FULL
    assert should_stop(state, config)


@pytest.mark.parametrize("overrides", [
    {"r": 1},
    {"p_alt": 1.5},
    {"min_lr": 0.0},
    {"base_lr": 1e-7, "min_lr": 1e-6},
    {"stage_fractions": (0.6, 0.4)},
    {"lr_factors": {"warp": 1.0}},
    {"patch_size": 4},
    {"plateau_window": 2},
    {"guide_blur": -0.5},
])
def test_invalid_config_rejected(overrides):
    with pytest.raises(ConfigError):
        TrainConfig(**overrides).validate()


# ==================== Step ====================

def test_affine_stage_leaves_later_layers_untouched(pair):
    config = tiny_config()
    state, weights, stack = fresh_session(config, pair)
    stack.stage = DeformationStage.AFFINE
    before = weights.fe1[0].weight.data.copy()
    for scheme in (Scheme.DOWNSAMPLING, Scheme.UPSAMPLING):
        loss = train_step(state, weights, stack, pair, scheme, config)
        assert np.isfinite(loss) and loss > 0
    assert not np.array_equal(stack.affine.matrix.data, [[1, 0, 0], [0, 1, 0]])
    assert not np.array_equal(weights.fe1[0].weight.data, before)
    assert np.all(stack.cpab.coefficients.data == 0)
    assert np.all(stack.tps.displacements.data == 0)
    assert len(get_tape()) == 0


def test_frozen_deformation_stays_identity(pair):
    config = tiny_config(learn_deformation=False)
    state, weights, stack = fresh_session(config, pair)
    assert stack.active_layers() == ()
    train_step(state, weights, stack, pair, Scheme.DOWNSAMPLING, config)
    assert np.array_equal(stack.affine.matrix.data, [[1, 0, 0], [0, 1, 0]])


def test_non_finite_weights_abort(pair):
    config = tiny_config()
    state, weights, stack = fresh_session(config, pair)
    weights.fe1[0].weight.data[...] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        train_step(state, weights, stack, pair, Scheme.UPSAMPLING, config)
    assert info.value.scheme == "upsampling"
    assert len(get_tape()) == 0


# ==================== Loop ====================

def test_training_is_reproducible(pair):
    first = train(pair, tiny_config(seed=11))
    second = train(pair, tiny_config(seed=11))
    assert first.report.loss_trace == second.report.loss_trace
    assert first.report.iterations == 6
    assert first.report.stopped_by == "max_iters"
    assert sum(first.report.scheme_counts.values()) == 6


def test_training_walks_through_the_stages(pair):
    result = train(pair, tiny_config(max_iters=10))
    assert result.report.stage_transitions == [(0, "affine"), (2, "affine+cpab"), (5, "full")]
    assert result.stack.stage is DeformationStage.FULL


def test_report_record_lists_settings():
    report = TrainingReport(0.05, 10, 1.5, 7, "max_iters", [0.1, 0.05], [(0, 1e-4)],
                            {"downsampling": 7, "upsampling": 3}, [(0, "affine")],
                            TrainConfig(seed=7).to_dict())
    lines = report.to_record().splitlines()
    assert "seed=7" in lines
    assert "stopped_by=max_iters" in lines
    assert "scheme_upsampling=3" in lines
    assert "loss_trace=0.1,0.05" in lines
    assert "config.seed=7" in lines
    assert "config.lr_factors.tps=0.5" in lines
    assert "config.augmentation.rotation=-15.0,15.0" in lines




def test_blur_guide_smooths_texture_and_keeps_flat_areas():
    flat = Tensor(np.full((1, 3, 10, 10), 0.4))
    assert np.allclose(blur_guide(flat, 1.5).data, 0.4, atol=1e-6)
    stripes = Tensor(np.tile(0.5 + 0.3 * (-1.0) ** np.arange(10), (1, 3, 10, 1)))
    smoothed = blur_guide(stripes, 2.0)
    assert smoothed.shape == stripes.shape and smoothed.dtype == stripes.dtype
    assert np.ptp(smoothed.data[..., 2:8]) < 0.1 * np.ptp(stripes.data)
    assert blur_guide(stripes, 0.0) is stripes


def test_blurred_guide_changes_training_and_stays_reproducible(pair):
    plain = train(pair, tiny_config(max_iters=10, seed=2))
    blurred = train(pair, tiny_config(max_iters=10, seed=2, guide_blur=2.0))
    assert blurred.report.iterations == 10
    assert blurred.report.loss_trace[0] != plain.report.loss_trace[0]
    assert blurred.report.config["guide_blur"] == 2.0
    again = train(pair, tiny_config(max_iters=10, seed=2, guide_blur=2.0))
    assert again.report.loss_trace == blurred.report.loss_trace


@pytest.mark.slow
def test_loss_halves_within_400_iterations():
    drops = []
    for seed in range(3):
        bench = make_benchmark_pair(h=32, w=32, r=2, seed=seed, texture=0.0)
        trace = train(bench.pair, TrainConfig(patch_size=16, max_iters=400, seed=seed)).report.loss_trace
        drops.append(1.0 - np.mean(trace[-20:]) / np.mean(trace[:5]))
    assert np.mean(drops) >= 0.5


@pytest.mark.slow
def test_small_pair_trains_to_stop_within_five_minutes():
    bench = make_benchmark_pair(h=32, w=32, r=2, seed=0)
    report = train(bench.pair, TrainConfig(seed=0)).report
    assert report.stopped_by in ("max_iters", "plateau")
    assert 0.0 < report.wall_time < 300.0
    assert f"wall_time={report.wall_time:.3f}" in report.to_record().splitlines()
