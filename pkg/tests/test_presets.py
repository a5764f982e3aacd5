import json
import math
from pathlib import Path

import pytest

from crowdode.presets import PRESETS, Threshold, list_presets, run_preset


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_preset_configs_validate(name):
    preset = PRESETS[name]
    cfg = preset.config()
    assert not Path(cfg.output_dir).is_absolute()
    assert cfg.train.epochs == 30 and cfg.data.n_agents == 5 and cfg.data.n_runs >= 20
    assert cfg.data.source == preset.reference
    assert preset.thresholds


def test_transfer_presets_share_training():
    a, b = PRESETS["sfm-n5"].config(), PRESETS["sfm-n20-transfer"].config()
    assert a.training_digest() == b.training_digest()
    assert b.eval.n_agents == 20 and b.eval.spawn_mode == "bimodal"


def test_threshold_null_value_fails():
    th = Threshold("x", ("a",), "<=", 1.0)
    assert th.check({"a": 0.5}) == (0.5, True)
    value, ok = th.check({"a": None})
    assert math.isnan(value) and not ok


def test_unknown_preset():
    with pytest.raises(KeyError):
        run_preset("nope")
    assert set(list_presets()) == set(PRESETS)


def test_reduced_preset_run_and_cache(tmp_path):
    kw = dict(n_runs=1, data_runs=2, epochs=1, ade_runs=1)
    summary = run_preset("sfm-n5", tmp_path, **kw)
    assert all(summary.artifacts.values()), summary.artifacts
    assert [r["metric"] for r in summary.rows] == [PRESETS["sfm-n5"].thresholds[0].label]
    assert (tmp_path / "sfm-n5" / "summary.tsv").read_text().startswith("preset sfm-n5")
    sources = json.loads((tmp_path / "sfm-n5" / "sources.json").read_text())
    ck = tmp_path / sources["model"] / "checkpoint.json"
    stamp = ck.stat().st_mtime_ns
    again = run_preset("sfm-n5", tmp_path, **kw)
    assert ck.stat().st_mtime_ns == stamp
    assert again.rows == summary.rows
