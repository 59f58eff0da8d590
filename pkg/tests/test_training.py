"""Tests for darkformer.training module."""

import csv
import dataclasses
import math
import pathlib

import numpy as np
import pytest

from darkformer import training
from darkformer.config import RunConfig
from darkformer.losses import LossTerms
from darkformer.model import infer, init_params
from darkformer.synth import make_dataset
from darkformer.tensor import Tensor
from darkformer.types import AttentionMode, Domain, Schedule, VideoClip


def _tiny(**changes: object) -> RunConfig:
    return dataclasses.replace(RunConfig.tiny(), **changes)


def test_learning_rate_schedules() -> None:
    """Test constant and cosine schedules."""
    assert training.learning_rate(Schedule.Constant, 0.1, 7, 10) == 0.1
    assert training.learning_rate(Schedule.Cosine, 0.1, 0, 10) == pytest.approx(0.1)
    assert training.learning_rate(Schedule.Cosine, 0.1, 5, 10) == pytest.approx(0.05)
    assert training.learning_rate(Schedule.Cosine, 0.1, 10, 10) == pytest.approx(0.0)


def test_clip_grad_norm() -> None:
    """Test gradients are rescaled to the bound and the original norm is returned."""
    a, b = Tensor(np.zeros(2)), Tensor(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert training.clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(a.grad, [0.6, 0.0])
    np.testing.assert_allclose(b.grad, [0.8])
    assert training.clip_grad_norm([a, b], 10.0) == pytest.approx(1.0)
    np.testing.assert_allclose(b.grad, [0.8])


def test_sgd_momentum() -> None:
    """Test two heavy-ball steps with a constant gradient."""
    p = Tensor([1.0])
    opt = training.Sgd([p], momentum=0.9)
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step(0.1)
    assert p.data[0] == pytest.approx(1.0 - 0.1 - 0.19)


def test_adam_first_step_is_lr_sized() -> None:
    """Test bias correction makes the first Adam step ±lr per entry."""
    p = Tensor([1.0, 1.0])
    opt = training.Adam([p])
    p.grad = np.array([0.001, -50.0])
    opt.step(0.01)
    np.testing.assert_allclose(p.data, [0.99, 1.01], atol=1e-6)


def test_decoupled_weight_decay() -> None:
    """Test decay shrinks parameters without a gradient."""
    p = Tensor([2.0])
    training.Sgd([p], momentum=0.0, weight_decay=0.5).step(0.1)
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_evaluate_counts() -> None:
    """Test accuracy and confusion matrix agree and cover every clip."""
    cfg = _tiny()
    params = training.build_model(cfg)
    data = training.sample_dataset(make_dataset(cfg.synth_config()), cfg.clip_spec()).unwrap()
    result = training.evaluate(params, data.test_target, batch_size=4).unwrap()
    assert result.count == 6
    assert result.confusion.sum() == 6
    assert result.top1 == pytest.approx(np.trace(result.confusion) / 6)
    assert result.top5 is None


def test_evaluate_same_for_any_worker_count() -> None:
    """Test threaded evaluation gives identical predictions."""
    cfg = _tiny()
    params = training.build_model(cfg)
    data = training.sample_dataset(make_dataset(cfg.synth_config()), cfg.clip_spec()).unwrap()
    one = training.evaluate(params, data.test_source, batch_size=1, workers=1).unwrap()
    many = training.evaluate(params, data.test_source, batch_size=1, workers=4).unwrap()
    np.testing.assert_array_equal(one.predictions, many.predictions)


def test_evaluate_top5_with_many_classes() -> None:
    """Test top-5 is reported above five classes and never below top-1."""
    cfg = _tiny(num_classes=8)
    params = init_params(cfg.model_config(), np.random.default_rng(0))
    rng = np.random.default_rng(1)
    clips = [
        VideoClip(frames=rng.uniform(size=(3, 4, 4, 1)), label=i % 8, domain=Domain.Source) for i in range(16)
    ]
    result = training.evaluate(params, clips).unwrap()
    assert result.top5 is not None
    assert result.top5 >= result.top1


def test_infer_accuracy_matches_evaluate() -> None:
    """Test top-1 from evaluate equals the hit rate of infer on the same clips."""
    cfg = _tiny()
    params = training.build_model(cfg)
    data = training.sample_dataset(make_dataset(cfg.synth_config()), cfg.clip_spec()).unwrap()
    clips = data.test_target
    result = training.evaluate(params, clips, batch_size=4).unwrap()
    predicted = infer(np.stack([c.frames for c in clips]), params).classes
    labels = np.array([c.label for c in clips])
    assert result.top1 == pytest.approx(float(np.mean(predicted == labels)))
    np.testing.assert_array_equal(result.predictions, predicted)


def test_evaluate_errors() -> None:
    """Test empty inputs and out of range labels."""
    params = training.build_model(_tiny())
    assert training.evaluate(params, []).is_err()
    clip = VideoClip(frames=np.zeros((3, 4, 4, 1)), label=7, domain=Domain.Target)
    assert "labels" in training.evaluate(params, [clip]).unwrap_err()


def test_zero_learning_rate_leaves_parameters_unchanged() -> None:
    """Test a run with lr = 0 returns bit-identical parameters."""
    cfg = _tiny(lr=0.0, epochs=2)
    params = training.build_model(cfg)
    before = {name: t.data.copy() for name, t in params}
    trained, records = training.train(params, make_dataset(cfg.synth_config()), cfg).unwrap()
    assert len(records) == 2
    for name, t in trained:
        np.testing.assert_array_equal(t.data, before[name])


def test_training_is_deterministic() -> None:
    """Test the same seed gives bit-identical parameters and metrics."""
    cfg = _tiny(epochs=2)
    data = make_dataset(cfg.synth_config())
    a, rec_a = training.train(training.build_model(cfg), data, cfg).unwrap()
    b, rec_b = training.train(training.build_model(cfg), data, cfg).unwrap()
    for (_, ta), (_, tb) in zip(a, b, strict=True):
        np.testing.assert_array_equal(ta.data, tb.data)
    assert [r.losses.total for r in rec_a] == [r.losses.total for r in rec_b]


def test_training_reduces_loss() -> None:
    """Test the objective falls when fitting a handful of pairs."""
    cfg = _tiny(epochs=15, lr=0.01, schedule=Schedule.Constant, weight_decay=0.0)
    _, records = training.train(training.build_model(cfg), make_dataset(cfg.synth_config()), cfg).unwrap()
    assert records[-1].losses.total < records[0].losses.total


def test_on_epoch_callback() -> None:
    """Test the callback sees every record in order."""
    cfg = _tiny(epochs=2)
    seen: list[int] = []
    training.train(training.build_model(cfg), make_dataset(cfg.synth_config()), cfg, lambda r: seen.append(r.epoch))
    assert seen == [1, 2]


def test_train_rejects_mismatched_data() -> None:
    """Test class-count mismatches and clips too short for the sampler."""
    cfg = _tiny()
    data = make_dataset(cfg.synth_config())
    wrong = _tiny(num_classes=2)
    assert "classes" in training.train(training.build_model(wrong), data, wrong).unwrap_err()
    longer = _tiny(frames=4)
    assert "need" in training.train(training.build_model(longer), data, longer).unwrap_err()


def test_non_finite_loss_stops_training(monkeypatch: pytest.MonkeyPatch) -> None:
    """Test a NaN objective raises with the failing epoch and step."""
    cfg = _tiny()

    def broken(triple: object, labels: object, weights: object) -> tuple[Tensor, LossTerms]:
        return Tensor(math.nan), LossTerms(total=math.nan)

    monkeypatch.setattr(training, "total_loss", broken)
    with pytest.raises(training.NonFiniteLossError) as info:
        training.train(training.build_model(cfg), make_dataset(cfg.synth_config()), cfg)
    assert (info.value.epoch, info.value.step) == (1, 0)


def test_attention_scores_per_layer() -> None:
    """Test per-layer score counts for the divided passes."""
    assert training.attention_scores_per_layer(training.build_model(_tiny())) == 12 * 4 + 12 * 5 + 2 * 13
    space = _tiny(attention_mode=AttentionMode.Space)
    assert training.attention_scores_per_layer(training.build_model(space)) == 12 * 5 + 13


def test_ablate_rows(tmp_path: pathlib.Path) -> None:
    """Test one row per grid cell and the CSV layout."""
    base = _tiny(ablation_seeds=(1, 2))
    data = make_dataset(base.synth_config())
    cells = [{"cross_attention": "on"}, {"cross_attention": "off"}]
    rows = training.ablate(data, base, cells).unwrap()
    assert [row.cell for row in rows] == cells
    assert all(len(row.records) == 2 for row in rows)
    path = tmp_path / "ablation.csv"
    training.write_ablation_csv(path, ["cross_attention"], rows)
    with open(path, newline="") as f:
        lines = list(csv.reader(f))
    assert lines[0] == ["cross_attention", *training.ABLATION_COLUMNS]
    assert lines[1][:2] == ["on", "1 2"]
    assert len(lines) == 3


def test_ablate_space_time_grid() -> None:
    """Test the attention mode by cross-attention grid yields six rows with per-mode score counts."""
    base = _tiny(ablation_seeds=(1,))
    cells = [
        {"attention_mode": mode, "cross_attention": cross} for mode in ("S", "T", "S+T") for cross in ("on", "off")
    ]
    rows = training.ablate(make_dataset(base.synth_config()), base, cells).unwrap()
    assert [row.cell for row in rows] == cells
    scores = {row.cell["attention_mode"]: row.attention_scores for row in rows}
    assert scores == {"S": 12 * 5 + 13, "T": 12 * 4 + 13, "S+T": 12 * 4 + 12 * 5 + 2 * 13}
    assert all(0.0 <= row.source_top1 <= 1.0 and 0.0 <= row.target_top1 <= 1.0 for row in rows)


def test_ablate_bad_cell() -> None:
    """Test an invalid grid value names its cell."""
    base = _tiny()
    result = training.ablate(make_dataset(base.synth_config()), base, [{"heads": "3"}])
    assert "grid cell" in result.unwrap_err()


def test_metrics_and_confusion_csv(tmp_path: pathlib.Path) -> None:
    """Test the per-epoch and confusion CSV layouts."""
    cfg = _tiny()
    _, records = training.train(training.build_model(cfg), make_dataset(cfg.synth_config()), cfg).unwrap()
    metrics = tmp_path / "metrics.csv"
    training.write_metrics_csv(metrics, records)
    lines = metrics.read_text().splitlines()
    assert lines[0].split(",") == list(training.METRICS_HEADER)
    assert lines[1].startswith("1,")
    confusion = tmp_path / "confusion.csv"
    training.write_confusion_csv(confusion, records[-1].target.confusion)
    rows = confusion.read_text().splitlines()
    assert rows[0] == "true\\pred,0,1,2"
    assert len(rows) == 4
