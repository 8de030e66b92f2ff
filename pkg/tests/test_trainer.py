import json
import math

import numpy as np
import pytest
import torch

from roimatch.data import synth_pair
from roimatch.loss import LossConfig
from roimatch.model import ModelConfig, load_checkpoint
from roimatch.trainer import (NumericFailure, TrainConfig, _allowed_levels, build_model, infer_pair,
                              train, validate)


def tiny_model(seed=0):
    return build_model(ModelConfig(input_size=(64, 64), base_channels=8, head_channels=8), seed)


@pytest.fixture(scope="module")
def samples():
    return [synth_pair(lv, i, size=64) for i, lv in enumerate(["I", "II", "III", "I"])]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(milestones=(10, 5))
    with pytest.raises(ValueError):
        TrainConfig(strategy="random")
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    assert TrainConfig(max_iterations=1000).resolved_milestones() == [600, 800]


def test_curriculum_thirds():
    assert _allowed_levels("curriculum", 0, 90) == ("I",)
    assert _allowed_levels("curriculum", 30, 90) == ("I", "II")
    assert _allowed_levels("curriculum", 89, 90) == ("I", "II", "III")
    assert _allowed_levels("joint", 0, 90) == ("I", "II", "III")


def test_zero_iterations_keeps_init(samples, tmp_path):
    model = tiny_model()
    init = {k: v.clone() for k, v in model.state_dict().items()}
    res = train(model, samples, train_config=TrainConfig(max_iterations=0), out_dir=tmp_path)
    assert res.log == []
    loaded, _ = load_checkpoint(tmp_path / "last.pt")
    for k, v in loaded.state_dict().items():
        assert torch.equal(v, init[k])


def test_seed_determinism(samples):
    cfg = TrainConfig(max_iterations=5, batch_size=2, seed=3)
    a = train(tiny_model(), samples, train_config=cfg).log
    b = train(tiny_model(), samples, train_config=cfg).log
    assert json.dumps(a) == json.dumps(b)


def test_log_written_and_loss_decreases(samples, tmp_path):
    cfg = TrainConfig(max_iterations=30, batch_size=2, learning_rate=1e-3, augment=False,
                      eval_every=15)
    res = train(tiny_model(), samples, LossConfig(), cfg, val_samples=samples[:2], out_dir=tmp_path)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 30
    entry = json.loads(lines[0])
    assert set(entry) == {"iteration", "lr", "total", "region", "kernel", "agg", "dis", "ohem_mask_coverage"}
    assert np.mean([e["total"] for e in res.log[-10:]]) < np.mean([e["total"] for e in res.log[:10]])
    assert (tmp_path / "best.pt").exists() and res.best_iteration in (15, 30)


def test_non_finite_loss_aborts(samples, tmp_path):
    model = tiny_model()
    model.head.register_forward_hook(lambda m, i, out: type(out)(*(o * math.nan for o in out)))
    with pytest.raises(NumericFailure):
        train(model, samples, train_config=TrainConfig(max_iterations=3), out_dir=tmp_path)
    snap = torch.load(tmp_path / "failure_snapshot.pt")
    assert snap["iteration"] == 0 and len(snap["pair_ids"]) == 4


def test_validate_random_model_finite(samples):
    rep = validate(tiny_model(), samples)
    assert all(math.isfinite(v) for v in (rep.miou, rep.precision, rep.recall, rep.f_measure))


def test_validate_empty_split():
    with pytest.raises(ValueError):
        validate(tiny_model(), [])


def test_checkpoint_round_trip_metrics(samples, tmp_path):
    model = tiny_model()
    train(model, samples, train_config=TrainConfig(max_iterations=2, batch_size=2), out_dir=tmp_path)
    loaded, _ = load_checkpoint(tmp_path / "last.pt")
    assert validate(model, samples).to_json() == validate(loaded, samples).to_json()


def test_infer_pair_target_resolution():
    s = synth_pair("II", 0, size=96)
    res = infer_pair(tiny_model(), s.reference_image, s.reference_mask, s.target_image)
    assert res.merged.shape == (96, 96)
