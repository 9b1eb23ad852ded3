import math

import numpy as np
import pytest
import torch

from sparsegs.errors import EmptyField
from sparsegs.field import GaussianField, inverse_sigmoid
from sparsegs.initializer import PointCloudSeed
from sparsegs.pruning import build_feature_stack
from sparsegs.trainer import (
    TAU_PRESETS,
    TrainConfig,
    config_from_file,
    densify_and_prune_base,
    init_state,
    load_checkpoint_field,
    plan_events,
    position_lr,
    save_checkpoint,
    train,
    train_step,
    write_loss_csv,
)


def small_setup(scene, n_seed=25, rng_seed=0, **cfg_overrides):
    rng = np.random.default_rng(rng_seed)
    gt = scene.gt_field.positions.numpy()
    idx = rng.choice(len(gt), size=min(n_seed, len(gt)), replace=False)
    seed = PointCloudSeed(
        gt[idx] + rng.normal(0, 0.01, (len(idx), 3)),
        rng.uniform(0.2, 0.8, (len(idx), 3)),
        np.zeros(len(idx), dtype=np.uint8),
    )
    defaults = dict(
        total_iters=40, densify_interval=10, densify_until_iter=30,
        opacity_reset_interval=1000, prune_steps_total=3, prune_i_step=12,
        tau_schedule=(0.7, 0.75, 0.8), level_dims=(4, 4), rng_seed=rng_seed,
        preset="forward_facing", sh_degree=1, background=tuple(scene.background),
    )
    defaults.update(cfg_overrides)
    cfg = TrainConfig(**defaults).resolved()
    state = init_state(seed, scene.views, cfg)
    feats = build_feature_stack(scene.views, cfg.level_dims)
    return state, feats, cfg


class TestConfig:
    def test_position_lr_endpoints(self):
        cfg = TrainConfig(total_iters=10000).resolved()
        assert position_lr(0, cfg) == pytest.approx(0.0016)
        assert position_lr(10000, cfg) == pytest.approx(0.000016)
        assert position_lr(5000, cfg) == pytest.approx(math.sqrt(0.0016 * 0.000016))

    def test_preset_defaults(self):
        ff = TrainConfig(preset="forward_facing").resolved()
        assert ff.prune_steps_total == 3
        assert ff.tau_schedule == (0.75, 0.8, 0.85)
        pan = TrainConfig(preset="panoramic").resolved()
        assert pan.prune_steps_total == 4
        assert pan.tau_schedule == (0.6, 0.65, 0.7, 0.8)

    def test_preset_full_lists(self):
        four = TrainConfig(preset="forward_facing", prune_steps_total=4).resolved()
        assert four.tau_schedule == TAU_PRESETS["forward_facing"]

    def test_schedule_length_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(prune_steps_total=3, tau_schedule=(0.5, 0.6)).resolved()

    def test_densify_until_default(self):
        cfg = TrainConfig(total_iters=8000).resolved()
        assert cfg.densify_until_iter == 4000

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(rotation_lr=-1.0).resolved()
        with pytest.raises(ValueError):
            TrainConfig(densify_interval=0).resolved()
        with pytest.raises(ValueError):
            TrainConfig(preset="unknown").resolved()

    def test_config_file_round_trip(self, tmp_path):
        text = """
# training config
total_iters = 500
position_lr_init = 0.002
tau_schedule = 0.5,0.6,0.7
level_dims = 4,4
preset = panoramic
prune_steps_total = 3
mvc_prune_enabled = false
background = 0.1,0.2,0.3
"""
        path = tmp_path / "config.txt"
        path.write_text(text)
        overrides = config_from_file(path)
        cfg = TrainConfig(**overrides).resolved()
        assert cfg.total_iters == 500
        assert cfg.position_lr_init == 0.002
        assert cfg.tau_schedule == (0.5, 0.6, 0.7)
        assert cfg.level_dims == (4, 4)
        assert not cfg.mvc_prune_enabled
        assert cfg.background == (0.1, 0.2, 0.3)

    def test_config_file_unknown_key(self, tmp_path):
        path = tmp_path / "config.txt"
        path.write_text("bogus_key = 3\n")
        with pytest.raises(ValueError):
            config_from_file(path)


class TestPlanEvents:
    def test_paper_schedule(self):
        cfg = TrainConfig(total_iters=10000, preset="forward_facing", prune_steps_total=3).resolved()
        prunes = []
        eadr_flip = None
        from sparsegs.losses import eadr_weight

        for i in range(10000):
            for event in plan_events(i, cfg):
                if event[0] == "mvc_prune":
                    prunes.append((i, event[1], event[2]))
            if eadr_flip is None and eadr_weight(i, cfg.prune_steps_total, cfg.prune_i_step) == 1:
                eadr_flip = i
        assert prunes == [(3000, 1, 0.75), (6000, 2, 0.8), (9000, 3, 0.85)]
        assert eadr_flip == 6000

    def test_collision_order(self):
        cfg = TrainConfig(total_iters=10000, densify_interval=300, densify_until_iter=4000,
                          opacity_reset_interval=1000, prune_i_step=3000,
                          prune_steps_total=3, tau_schedule=(0.7, 0.8, 0.85)).resolved()
        events = plan_events(3000, cfg)
        assert [e[0] for e in events] == ["densify", "opacity_reset", "mvc_prune"]

    def test_opacity_resets_stop_after_final_gate(self):
        cfg = TrainConfig(total_iters=10000, opacity_reset_interval=1000,
                          prune_i_step=3000, prune_steps_total=3).resolved()
        reset_iters = [i for i in range(10000) if ("opacity_reset",) in plan_events(i, cfg)]
        assert reset_iters == [1000, 2000, 3000, 4000, 5000, 6000]

    def test_nothing_at_iteration_zero(self):
        cfg = TrainConfig().resolved()
        assert plan_events(0, cfg) == []


class TestTrainStep:
    def test_zero_learning_rates_freeze_parameters(self, cluster_scene):
        state, feats, cfg = small_setup(
            cluster_scene, total_iters=5,
            position_lr_init=0.0, position_lr_final=0.0, rotation_lr=0.0,
            scale_lr=0.0, opacity_lr=0.0, sh_lr=0.0,
            densify_interval=1000, prune_i_step=1000,
        )
        before = {k: v.detach().clone() for k, v in state.field.raw_parameters().items()}
        for _ in range(5):
            train_step(state, cluster_scene.views, feats, cfg)
        for k, v in state.field.raw_parameters().items():
            assert torch.equal(before[k], v.detach()), k

    def test_loss_decreases_from_start(self, cluster_scene):
        state, feats, cfg = small_setup(cluster_scene, total_iters=60, densify_interval=1000,
                                        prune_i_step=1000)
        first = train_step(state, cluster_scene.views, feats, cfg)
        losses = [train_step(state, cluster_scene.views, feats, cfg).total for _ in range(59)]
        assert min(losses) < first.total

    def test_empty_field_raises(self, cluster_scene):
        state, feats, cfg = small_setup(cluster_scene)
        state.field = state.field.masked(np.zeros(len(state.field), dtype=bool))
        with pytest.raises(EmptyField):
            train_step(state, cluster_scene.views, feats, cfg)

    def test_moment_buffers_track_field_size(self, cluster_scene):
        state, feats, cfg = small_setup(cluster_scene, total_iters=40)
        for _ in range(40):
            train_step(state, cluster_scene.views, feats, cfg)
            for group in state.optimizer.param_groups:
                stored = state.optimizer.state.get(group["params"][0])
                assert group["params"][0].shape[0] == len(state.field)
                if stored is not None:
                    assert stored["exp_avg"].shape[0] == len(state.field)
                    assert stored["exp_avg_sq"].shape[0] == len(state.field)
            assert state.field.grad_accum.shape[0] == len(state.field)
            assert state.field.grad_count.shape[0] == len(state.field)

    def test_prune_events_recorded_with_tau(self, cluster_scene):
        state, feats, cfg = small_setup(cluster_scene, total_iters=40)
        for _ in range(40):
            train_step(state, cluster_scene.views, feats, cfg)
        prunes = [e for e in state.events if e["event"] == "mvc_prune"]
        assert [(e["iter"], e["t"], e["tau"]) for e in prunes] == [
            (12, 1, 0.7), (24, 2, 0.75), (36, 3, 0.8)
        ]

    def test_history_rows_complete(self, cluster_scene):
        state, feats, cfg = small_setup(cluster_scene, total_iters=8, densify_interval=1000,
                                        prune_i_step=1000)
        train(state, cluster_scene.views, feats)
        assert len(state.history) == 8
        assert set(state.history[0]) == {"iter", "photometric", "eadr", "eadr_weight", "total", "n_gaussians"}

    def test_determinism_in_process(self, cluster_scene):
        runs = []
        for _ in range(2):
            state, feats, cfg = small_setup(cluster_scene, total_iters=30)
            train(state, cluster_scene.views, feats)
            runs.append(state)
        for k in runs[0].field.raw_parameters():
            assert torch.equal(runs[0].field.raw_parameters()[k], runs[1].field.raw_parameters()[k])
        assert runs[0].history == runs[1].history

    def test_mvc_prune_only_removes(self, cluster_scene):
        # same seed, pruning toggled: enabled run never ends with more Gaussians
        results = {}
        for mvc in (True, False):
            state, feats, cfg = small_setup(cluster_scene, total_iters=40, mvc_prune_enabled=mvc)
            train(state, cluster_scene.views, feats)
            results[mvc] = len(state.field)
        assert results[True] <= results[False]

    def test_eadr_weight_appears_in_history(self, cluster_scene):
        state, feats, cfg = small_setup(cluster_scene, total_iters=30, prune_i_step=10,
                                        prune_steps_total=3, tau_schedule=(0.7, 0.75, 0.8))
        train(state, cluster_scene.views, feats)
        weights = [row["eadr_weight"] for row in state.history]
        assert all(w == 0 for w in weights[:20])
        assert all(w == 1 for w in weights[20:])


class TestDensify:
    def test_below_threshold_no_growth(self, cluster_scene):
        state, feats, cfg = small_setup(cluster_scene, densify_grad_threshold=1e9,
                                        total_iters=25, densify_interval=10, prune_i_step=1000)
        counts = []
        for _ in range(25):
            train_step(state, cluster_scene.views, feats, cfg)
            counts.append(len(state.field))
        assert max(counts) <= counts[0]  # no clone/split; removals only

    def test_low_opacity_pruned(self, cluster_scene):
        state, feats, cfg = small_setup(cluster_scene)
        with torch.no_grad():
            state.field.opacity_logits[3] = inverse_sigmoid(0.001)
        densify_and_prune_base(state, cfg)
        assert (state.field.opacities() >= cfg.opacity_prune_floor).all()

    def test_split_children_scale_ratio(self, cluster_scene):
        state, feats, cfg = small_setup(cluster_scene)
        m = len(state.field)
        with torch.no_grad():
            state.field.grad_accum[:] = 0.0
            state.field.grad_count[:] = 1.0
            state.field.grad_accum[0] = 10 * cfg.densify_grad_threshold
            # make gaussian 0 oversized so it splits rather than clones
            state.field.log_scales[0] = math.log(cfg.percent_dense * state.scene_extent * 5)
        parent_scale = state.field.scales()[0].detach().clone()
        densify_and_prune_base(state, cfg)
        # parent removed, two children appended at the end with scale/1.6
        assert len(state.field) == m + 1
        child_scales = state.field.scales()[-2:]
        for child in child_scales:
            assert torch.allclose(child, parent_scale / 1.6)

    def test_clone_duplicates_small_gaussian(self, cluster_scene):
        state, feats, cfg = small_setup(cluster_scene)
        m = len(state.field)
        with torch.no_grad():
            state.field.grad_accum[:] = 0.0
            state.field.grad_count[:] = 1.0
            state.field.grad_accum[1] = 10 * cfg.densify_grad_threshold
            state.field.log_scales[1] = math.log(cfg.percent_dense * state.scene_extent * 0.1)
        pos = state.field.positions[1].detach().clone()
        densify_and_prune_base(state, cfg)
        assert len(state.field) == m + 1
        assert torch.equal(state.field.positions[-1], pos)

    def test_gradient_stats_reset(self, cluster_scene):
        state, feats, cfg = small_setup(cluster_scene)
        with torch.no_grad():
            state.field.grad_accum[:] = 1.0
            state.field.grad_count[:] = 2.0
        densify_and_prune_base(state, cfg)
        assert not state.field.grad_accum.any()
        assert not state.field.grad_count.any()


class TestCheckpoint:
    def test_round_trip(self, tmp_path, cluster_scene):
        state, feats, cfg = small_setup(cluster_scene, total_iters=6, densify_interval=1000,
                                        prune_i_step=1000)
        train(state, cluster_scene.views, feats, log_path=tmp_path / "loss.csv")
        ply = save_checkpoint(state, tmp_path / "ckpt")
        field = load_checkpoint_field(tmp_path / "ckpt")
        assert len(field) == len(state.field)
        expected = state.field.positions.detach().numpy().astype(np.float32)
        assert np.array_equal(field.positions.numpy(), expected.astype(np.float64))
        assert (tmp_path / "ckpt" / "checkpoint.json").exists()
        assert (tmp_path / "ckpt" / "optimizer.pt").exists()
        lines = (tmp_path / "loss.csv").read_text().splitlines()
        assert lines[0] == "iter,photometric,eadr,eadr_weight,total,n_gaussians"
        assert len(lines) == 7

    def test_write_loss_csv_subsampling(self, tmp_path):
        history = [{"iter": i, "photometric": 0.1, "eadr": 0.0, "eadr_weight": 0.0,
                    "total": 0.1, "n_gaussians": 5} for i in range(10)]
        write_loss_csv(history, tmp_path / "loss.csv", every=5)
        lines = (tmp_path / "loss.csv").read_text().splitlines()
        assert len(lines) == 1 + 3  # header + iters 0, 5, 9 (last always kept)
