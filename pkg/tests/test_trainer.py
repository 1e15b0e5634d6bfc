"""Optimizer, schedule, logging, and end-to-end training runs."""

import os

import numpy as np
import pytest

import gamreid.tensor as T
from gamreid.acl import MergeSchedule
from gamreid.backbone import Backbone, preset
from gamreid.dataio import SynthSpec, generate_synthetic, load_split
from gamreid.errors import ConfigError, IntegrityError, NumericError, UsageError
from gamreid.idl import AugmentationSpec
from gamreid.trainer import (SGD, LogRow, TrainConfig, learning_rate,
                             load_run_checkpoint, model_from_run_checkpoint,
                             render_log, run, write_log, _num_stages)


# ---------------------------------------------------------------------------
# optimizer


def test_sgd_two_steps_match_hand_computation():
    p0 = np.array([1.0, -2.0])
    g1 = np.array([0.5, 0.5])
    g2 = np.array([-1.0, 0.25])
    lr, mom, wd = 0.1, 0.9, 0.01

    param = T.Tensor(p0.copy())
    opt = SGD([("w", param)], lr, momentum=mom, weight_decay=wd)

    param.grad = g1.copy()
    opt.step()
    v1 = g1 + wd * p0
    p1 = p0 - lr * v1
    np.testing.assert_allclose(param.data, p1, atol=1e-15)

    param.grad = g2.copy()
    opt.step()
    v2 = mom * v1 + g2 + wd * p1
    p2 = p1 - lr * v2
    np.testing.assert_allclose(param.data, p2, atol=1e-15)


def test_sgd_rejects_non_finite_gradient():
    param = T.Tensor(np.ones(3))
    opt = SGD([("w", param)], 0.1)
    param.grad = np.array([1.0, np.nan, 0.0])
    with pytest.raises(NumericError):
        opt.step()


def test_sgd_leaves_gradless_params_untouched():
    a = T.Tensor(np.ones(2))
    b = T.Tensor(np.full(2, 3.0))
    opt = SGD([("a", a), ("b", b)], 0.5, momentum=0.0)
    a.grad = np.ones(2)
    b.grad = None
    opt.step()
    np.testing.assert_allclose(a.data, 0.5)
    np.testing.assert_array_equal(b.data, np.full(2, 3.0))


def test_sgd_zero_grad_clears():
    a = T.Tensor(np.ones(2))
    opt = SGD([("a", a)], 0.1)
    a.grad = np.ones(2)
    opt.zero_grad()
    assert a.grad is None


# ---------------------------------------------------------------------------
# schedule, config, log format


def test_learning_rate_steps_down_once():
    cfg = TrainConfig()
    assert learning_rate(cfg, 0) == 0.1
    assert learning_rate(cfg, 24) == 0.1
    assert learning_rate(cfg, 25) == pytest.approx(0.01)
    assert learning_rate(cfg, 400) == pytest.approx(0.01)
    custom = TrainConfig(lr_init=0.4, lr_drop_epoch=3, lr_drop_factor=4.0)
    assert learning_rate(custom, 2) == 0.4
    assert learning_rate(custom, 3) == 0.1


def test_train_config_validation():
    TrainConfig().validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(tau=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(idl_reduction="max").validate()
    with pytest.raises(ConfigError):
        TrainConfig(bank_mixing=1.5).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lr_drop_factor=0.5).validate()


def test_log_row_renders_tab_separated_reprs():
    row = LogRow(epoch=3, stage=1, j_idl=0.5, j_acl=0.125,
                 j_total=0.625, num_clusters=96, lr=0.1)
    assert row.render() == "3\t1\t0.5\t0.125\t0.625\t96\t0.1"
    # repr keeps full float precision, so logs are bit-faithful
    row2 = LogRow(epoch=0, stage=0, j_idl=1 / 3, j_acl=0.1, j_total=1 / 3 + 0.1,
                  num_clusters=7, lr=0.1)
    text = row2.render()
    assert repr(1 / 3) in text and text.split("\t")[2] == repr(1 / 3)


def test_write_log_matches_render(tmp_path):
    rows = [LogRow(0, 0, 0.5, 0.25, 0.75, 10, 0.1),
            LogRow(1, 0, 0.4, 0.2, 0.6000000000000001, 10, 0.1)]
    p = tmp_path / "train_log.tsv"
    write_log(str(p), rows)
    assert p.read_text() == render_log(rows)
    assert p.read_text().count("\n") == 2


def test_num_stages_override_and_derivation():
    schedule = MergeSchedule()
    assert _num_stages(TrainConfig(stages=7), schedule, 100) == 7
    derived = _num_stages(TrainConfig(stages=0), schedule, 100)
    n_c = schedule.merges_per_round(100)
    floor = schedule.cluster_floor(100)
    assert derived == int(np.ceil((100 - floor) / n_c)) + 1


# ---------------------------------------------------------------------------
# end-to-end runs on a small synthetic set


SMALL_CFG = TrainConfig(batch_size=16, stages=3, epochs_per_stage=2,
                        lr_init=0.05, lr_drop_epoch=4, seed=0)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("smallrun")
    spec = SynthSpec(num_identities=4, views_per_identity=8, num_cameras=2,
                     height=16, width=8, seed=0, split_mode="shared")
    entries = generate_synthetic(spec, str(root / "data"))
    images, _, _ = load_split(str(root / "data"), entries, "train")
    model = Backbone(preset("tiny"), seed=0)
    out = str(root / "out")
    result = run(model, images, SMALL_CFG, out_dir=out)
    return images, result, out


def test_run_produces_one_row_per_epoch(small_run):
    _, result, out = small_run
    assert len(result.rows) == SMALL_CFG.stages * SMALL_CFG.epochs_per_stage
    assert [r.epoch for r in result.rows] == list(range(6))
    assert [r.stage for r in result.rows] == [0, 0, 1, 1, 2, 2]
    for r in result.rows:
        assert r.j_total == r.j_idl + r.j_acl
        assert r.lr == learning_rate(SMALL_CFG, r.epoch)
    assert os.path.isfile(os.path.join(out, "train_log.tsv"))
    assert os.path.isfile(os.path.join(out, "final.ckpt"))
    assert os.path.isfile(os.path.join(out, "assignments.tsv"))


def test_loss_decreases_over_training(small_run):
    _, result, _ = small_run
    assert result.rows[-1].j_total < result.rows[0].j_total


def test_cluster_count_shrinks_by_schedule(small_run):
    _, result, _ = small_run
    # n=16 -> 1 merge between stages; rows record the bank size seen in-stage
    assert [r.num_clusters for r in result.rows] == [16, 16, 15, 15, 14, 14]
    assert len(result.mbank) == 14


def test_resume_reproduces_remaining_rows_exactly(small_run):
    images, result, out = small_run
    fresh = Backbone(preset("tiny"), seed=0)
    resumed = run(fresh, images, SMALL_CFG,
                  resume=os.path.join(out, "stage_000.ckpt"))
    assert render_log(resumed.rows) == render_log(result.rows[2:])
    np.testing.assert_array_equal(resumed.mbank.assignment, result.mbank.assignment)
    np.testing.assert_array_equal(resumed.mbank.centroids, result.mbank.centroids)


def test_resume_rejects_different_configuration(small_run):
    images, _, out = small_run
    fresh = Backbone(preset("tiny"), seed=0)
    other = TrainConfig(batch_size=16, stages=3, epochs_per_stage=2,
                        lr_init=0.05, lr_drop_epoch=4, seed=0, tau=0.2)
    with pytest.raises(IntegrityError):
        run(fresh, images, other, resume=os.path.join(out, "stage_000.ckpt"))


def test_resume_from_finished_checkpoint_is_an_error(small_run):
    images, _, out = small_run
    fresh = Backbone(preset("tiny"), seed=0)
    with pytest.raises(UsageError):
        run(fresh, images, SMALL_CFG, resume=os.path.join(out, "final.ckpt"))


def test_model_rebuilds_from_checkpoint(small_run):
    images, _, out = small_run
    rebuilt = model_from_run_checkpoint(os.path.join(out, "final.ckpt"))
    block, _ = load_run_checkpoint(os.path.join(out, "final.ckpt"))
    assert block["train"]["tau"] == SMALL_CFG.tau
    x = T.Tensor(images[:2])
    with T.no_grad():
        emb = rebuilt.embed(x)
    assert emb.data.shape == (2, rebuilt.config.embedding_dim)


def test_run_rejects_malformed_images():
    model = Backbone(preset("tiny"), seed=0)
    with pytest.raises(UsageError):
        run(model, np.zeros((4, 1, 16, 8)), SMALL_CFG)
    with pytest.raises(UsageError):
        run(model, np.zeros((1, 3, 16, 8)), SMALL_CFG)
