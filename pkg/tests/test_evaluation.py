import csv
import io
from dataclasses import replace

import numpy as np
import pytest

from tubeprune import anonymizer as an
from tubeprune import evaluation as ev
from tubeprune import numeric as nm
from tubeprune.datagen import SyntheticConfig, generate, privacy_cell_mask

SMALL_DATA = SyntheticConfig(frames=4, channels=1, height=16, width=16, blob=4, travel=10.0,
                             privacy_box=(0, 4, 0, 4), n_train=48, n_test=24)
SMALL_MODEL = an.ModelConfig(frames=4, channels=1, height=16, width=16, dt=2, dh=4, dw=4, dim=16, heads=2,
                             depth=2, prune_layers=(1,), keep_rate=0.75, drop=0.0, attn_drop=0.0)
FAST_PROBE = ev.ProbeConfig(epochs_act=2, epochs_priv=2)


@pytest.fixture(scope="module")
def small_data():
    return generate(SMALL_DATA)


def test_probe_inputs_pairs_frames_with_deltas():
    v = nm.make_rng(0).random((2, 3, 1, 8, 8))
    x = ev.probe_inputs(v, 4)
    assert x.shape == (2, 2, 2, 2, 2 * 16)
    # first patch of pair t: top-left 4x4 block of frame t, then of frame t+1 - frame t
    np.testing.assert_array_equal(x[1, 1, 0, 0, :16], v[1, 1, 0, :4, :4].ravel())
    np.testing.assert_allclose(x[1, 1, 0, 0, 16:], (v[1, 2, 0, :4, :4] - v[1, 1, 0, :4, :4]).ravel())
    with pytest.raises(ValueError):
        ev.probe_inputs(np.zeros((1, 2, 1, 6, 8)), 4)


def test_raw_probes_reach_oracle_level():
    cfg = SyntheticConfig(noise=0.0, n_train=256, n_test=8)
    train, _ = generate(cfg)
    probe_cfg = ev.ProbeConfig()
    act, hist = ev.train_probe(train, "action", probe_cfg)
    assert hist[-1] < hist[0]
    assert ev.top1(act.predict(train.videos), train.y_t) >= 99.0
    priv, _ = ev.train_probe(train, "privacy", probe_cfg)
    acc = ((priv.predict(train.videos) >= 0.0) == (train.y_b == 1)).mean(axis=0)
    assert (acc >= 0.99).all()


def test_train_probe_validation(small_data):
    train, _ = small_data
    with pytest.raises(ValueError):
        ev.train_probe(train.subset(slice(0, 0)), "action", FAST_PROBE)
    with pytest.raises(ValueError):
        ev.train_probe(train, "identity", FAST_PROBE)


def test_anonymize_at_full_keep_rate_is_identity(small_data):
    train, _ = small_data
    cfg = replace(SMALL_MODEL, keep_rate=1.0)
    params = an.init_params(cfg, nm.make_rng(1))
    anon = ev.anonymize_dataset(train, params, cfg)
    assert anon.data.videos.tobytes() == train.videos.tobytes()
    assert anon.cell_masks.all() and anon.blanked_fraction == 0.0
    np.testing.assert_array_equal(anon.data.y_t, train.y_t)


def test_blanked_fraction_matches_pruned_counts(small_data):
    _, test = small_data
    params = an.init_params(SMALL_MODEL, nm.make_rng(2))
    anon = ev.anonymize_dataset(test, params, SMALL_MODEL, fill=0.0)
    np.testing.assert_array_equal(anon.data.y_b, test.y_b)
    # 32 cells -> keep 24 (+1 fused); the fused token never maps to a pixel
    assert (anon.cell_masks.sum(axis=1) == 24).all()
    assert anon.blanked_fraction == pytest.approx(8 / 32, abs=1e-15)
    pix = anon.data.videos == test.videos
    assert pix.mean() >= 0.75 - 1e-12


def test_enrichment_closed_forms():
    pm = np.zeros(16, dtype=bool)
    pm[:2] = True
    only_priv = np.tile(pm, (3, 1))
    assert ev.enrichment_ratio(only_priv, pm) == 8.0
    everything = np.ones((3, 16), dtype=bool)
    assert ev.enrichment_ratio(everything, pm) == 1.0
    # half the dropped cells are private: (1/2) / (2/16)
    half = np.zeros((1, 16), dtype=bool)
    half[0, [0, 5]] = True
    assert ev.enrichment_ratio(half, pm) == 4.0
    assert ev.localization(~only_priv, pm) == 8.0
    with pytest.raises(ValueError):
        ev.enrichment_ratio(np.zeros((2, 16), dtype=bool), pm)


def test_random_drop_null_is_centered_on_one():
    cfg = an.ModelConfig()
    pm = privacy_cell_mask(SyntheticConfig(), cfg.tubelet)
    masks = np.ones((32, 128), dtype=bool)
    masks[:, :22] = False
    null = ev.random_drop_null(masks, pm, resamples=400, seed=3)
    assert abs(null.mean() - 1.0) <= 0.15
    np.testing.assert_array_equal(null, ev.random_drop_null(masks, pm, resamples=400, seed=3))


def test_metrics_report_ranges():
    ev.MetricsReport(100.0, 0.0, 1.0, 0.9, 0, 0.0)
    with pytest.raises(ValueError):
        ev.MetricsReport(100.5, 50.0, 0.5, 0.9, 0, 0.0)
    with pytest.raises(ValueError):
        ev.MetricsReport(50.0, 50.0, 1.5, 0.9, 0, 0.0)


def test_sweep_full_rate_equals_raw_baseline(small_data):
    cells = {}
    reports = ev.sweep([1.0], SMALL_DATA, SMALL_MODEL, an.TrainConfig(epochs=1), FAST_PROBE,
                       datasets=small_data, on_cell=lambda r, res: cells.update({r: res}))
    raw = cells[1.0].raw
    assert len(reports) == 1
    assert (reports[0].action_top1, reports[0].privacy_cmap) == (raw.action_top1, raw.privacy_cmap)
    with pytest.raises(ValueError):
        ev.sweep([0.0], SMALL_DATA, SMALL_MODEL, an.TrainConfig(epochs=1), FAST_PROBE, datasets=small_data)


def test_run_cell_small_pipeline(small_data):
    train, test = small_data
    res = ev.run_cell(train, test, SMALL_MODEL, an.TrainConfig(epochs=1), FAST_PROBE, SMALL_DATA, localize=8)
    assert res.anonymized.keep_rate == 0.75
    assert res.blanked_fraction == pytest.approx(0.25, abs=1e-15)
    assert np.isfinite(res.enrichment) and res.null_std >= 0.0
    assert len(res.loss_log) == 6
    again = ev.run_cell(train, test, SMALL_MODEL, an.TrainConfig(epochs=1), FAST_PROBE, SMALL_DATA,
                        raw_report=res.raw, localize=8)
    assert (again.anonymized.action_top1, again.anonymized.privacy_cmap, again.enrichment) == \
        (res.anonymized.action_top1, res.anonymized.privacy_cmap, res.enrichment)


def test_sweep_csv_layout():
    reps = [ev.MetricsReport(100.0, 99.5, 0.98, 1.0, 42, 0.0), ev.MetricsReport(97.25, 61.0, 0.5, 0.9, 42, 0.0)]
    rows = list(csv.reader(io.StringIO(ev.sweep_csv(reps))))
    assert rows[0] == ["keep_rate", "action_top1", "privacy_cmap", "privacy_f1", "seed", "wall_s"]
    assert rows[2] == ["0.9", "97.2500", "61.0000", "0.5000", "42", "0.0"]
