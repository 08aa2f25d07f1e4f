"""Training drivers: method parsing, pretraining, adaptation loop behavior."""

import numpy as np
import pytest
import torch

from sfodlab.controller import Action
from sfodlab.detector import init_detector, save_checkpoint
from sfodlab.training import (
    METHODS,
    MethodSpec,
    adapt,
    make_datasets,
    parse_method,
    pretrain_source,
    split_seed,
)

from conftest import tiny_run_config


def _tensors_equal(a, b):
    return set(a.tensors) == set(b.tensors) and all(
        torch.equal(a.tensors[k], b.tensors[k]) for k in a.tensors
    )


# ---------------------------------------------------------------- parsing


def test_parse_method_toggles():
    assert parse_method("source_only").trains is False
    mic = parse_method("mt_mic")
    assert mic.use_mask and not mic.use_historical and not mic.use_controller
    his = parse_method("mt_mic_his")
    assert his.use_mask and his.use_historical and not his.use_controller
    dru = parse_method("mt_mic_dru")
    assert dru.use_mask and dru.use_controller and not dru.use_historical
    full = parse_method("dru_full")
    assert full.use_mask and full.use_historical and full.use_controller


def test_parse_method_fixed_interval():
    assert parse_method("mt_fixed").ema_interval == 1
    assert parse_method("mt_fixed(4)").ema_interval == 4
    assert parse_method("mt_fixed", ema_interval=3).ema_interval == 3
    with pytest.raises(ValueError, match="cannot parse"):
        parse_method("mt_fixed[4]")
    with pytest.raises(ValueError, match="unknown method"):
        parse_method("teacher_student")


def test_method_spec_validates_interval():
    with pytest.raises(ValueError):
        MethodSpec(name="mt_fixed", ema_interval=0)
    assert "dru_full" in METHODS


# ---------------------------------------------------------------- datasets


def test_split_seed_streams_distinct():
    seeds = {s: split_seed(7, s) for s in ("source_train", "source_val", "target_train", "target_val")}
    assert len(set(seeds.values())) == 4
    assert seeds["source_train"] == 71
    with pytest.raises(ValueError):
        split_seed(7, "test")


def test_make_datasets_shapes_and_domains():
    cfg = tiny_run_config()
    ds = make_datasets(cfg)
    assert sorted(ds) == ["source_train", "source_val", "target_train", "target_val"]
    assert len(ds["source_train"]) == cfg.n_source_train
    assert len(ds["target_val"]) == cfg.n_target_val
    assert ds["source_val"].domain == "source"
    assert ds["target_train"].domain == "target"
    # same config builds the same bytes
    again = make_datasets(cfg)
    assert np.array_equal(ds["target_train"].images, again["target_train"].images)


# ---------------------------------------------------------------- pretraining


def test_pretrain_smoke_and_history_cadence():
    cfg = tiny_run_config()
    result = pretrain_source(cfg)
    # 48 images / batch 8 = 6 steps per epoch, 2 epochs, eval_every 4
    assert [s for s, _ in result.history] == [1, 4, 8, 12]
    assert all(np.isfinite(l) and l > 0 for _, l in result.history)
    assert 0.0 <= result.source_val_map <= 1.0
    assert 0.0 <= result.target_val_map <= 1.0


def test_pretrain_is_deterministic():
    cfg = tiny_run_config()
    a = pretrain_source(cfg)
    b = pretrain_source(cfg)
    assert _tensors_equal(a.params, b.params)
    assert a.source_val_map == b.source_val_map


def test_pretrain_rejects_undersized_split():
    cfg = tiny_run_config(n_source_train=4)
    with pytest.raises(ValueError, match="smaller than one batch"):
        pretrain_source(cfg)


# ---------------------------------------------------------------- adaptation


def _adapt_setup(cfg):
    ds = make_datasets(cfg)
    source = init_detector(cfg.detector_config(), cfg.seed)
    return ds, source


def test_source_only_emits_single_baseline_row():
    cfg = tiny_run_config()
    ds, source = _adapt_setup(cfg)
    result = adapt(
        source, parse_method("source_only"), ds["target_train"].without_labels(),
        ds["target_val"], cfg,
    )
    assert len(result.ledger.rows) == 1
    assert result.ledger.rows[0].step == 0
    assert result.events == []
    assert _tensors_equal(result.teacher, source)
    assert _tensors_equal(result.student, source)


def test_adapt_ledger_cadence_and_epochs():
    cfg = tiny_run_config()
    ds, source = _adapt_setup(cfg)
    result = adapt(
        source, parse_method("mt_fixed"), ds["target_train"].without_labels(),
        ds["target_val"], cfg,
    )
    rows = result.ledger.rows
    assert [r.step for r in rows] == [0, 4, 8, 12]
    assert [r.epoch for r in rows] == [0, 0, 1, 2]
    counts = [r.teacher_updates for r in rows]
    assert counts == sorted(counts)


def test_adapt_epoch_and_cadence_overrides():
    cfg = tiny_run_config()
    ds, source = _adapt_setup(cfg)
    result = adapt(
        source, parse_method("mt_fixed"), ds["target_train"].without_labels(),
        ds["target_val"], cfg, epochs=1, eval_every=5,
    )
    assert [r.step for r in result.ledger.rows] == [0, 5, 6]


def test_mt_fixed_alpha_zero_teacher_tracks_student():
    cfg = tiny_run_config(ema_alpha=0.0)
    ds, source = _adapt_setup(cfg)
    result = adapt(
        source, parse_method("mt_fixed(1)"), ds["target_train"].without_labels(),
        ds["target_val"], cfg,
    )
    assert _tensors_equal(result.teacher, result.student)
    assert not _tensors_equal(result.teacher, source)


def test_mt_fixed_interval_counts_updates():
    cfg = tiny_run_config()
    ds, source = _adapt_setup(cfg)
    result = adapt(
        source, parse_method("mt_fixed(2)"), ds["target_train"].without_labels(),
        ds["target_val"], cfg,
    )
    # 12 steps at interval 2
    assert result.ledger.rows[-1].teacher_updates == 6
    assert result.ledger.rows[-1].student_retrains == 0
    assert [s for s, _ in result.events] == [2, 4, 6, 8, 10, 12]
    assert all(a is Action.TEACHER_UPDATED for _, a in result.events)


def test_adapt_never_reads_train_annotations():
    cfg = tiny_run_config()
    ds, source = _adapt_setup(cfg)
    train = ds["target_train"]
    train.seal_annotations()
    result = adapt(
        source, parse_method("dru_full"), train.without_labels(), ds["target_val"], cfg,
    )
    assert len(result.ledger.rows) == 4


def test_dru_controller_acts_within_every_window():
    cfg = tiny_run_config(meta_window=2)
    ds, source = _adapt_setup(cfg)
    result = adapt(
        source, parse_method("dru_full"), ds["target_train"].without_labels(),
        ds["target_val"], cfg,
    )
    state = result.controller_state
    assert state is not None
    # window 2 forces an update or retrain at least every second step
    assert len(result.events) >= 6
    last = result.ledger.rows[-1]
    assert last.teacher_updates == state.teacher_updates
    assert last.student_retrains == state.student_retrains
    assert last.teacher_updates + last.student_retrains == len(result.events)


def test_adapt_is_deterministic(tmp_path):
    paths = []
    ledgers = []
    for run in range(2):
        cfg = tiny_run_config()
        ds, source = _adapt_setup(cfg)
        result = adapt(
            source, parse_method("mt_mic_his"), ds["target_train"].without_labels(),
            ds["target_val"], cfg,
        )
        path = tmp_path / f"teacher_{run}.ckpt"
        save_checkpoint(result.teacher, path)
        paths.append(path)
        ledgers.append(result.ledger)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    for a, b in zip(ledgers[0].rows, ledgers[1].rows):
        assert a.step == b.step
        assert a.student_map50 == b.student_map50
        assert a.teacher_map50 == b.teacher_map50
        assert a.mean_uncertainty == b.mean_uncertainty
        assert a.teacher_updates == b.teacher_updates
