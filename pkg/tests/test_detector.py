"""Detector training, prediction, gradients, and serialization."""

import numpy as np
import pytest
import torch

from celladapt.data import generate_synthetic_dataset

from conftest import tiny_round_spec
from celladapt.detector import (
    DetectorModel,
    TrainConfig,
    TrainingDivergedError,
    mse_loss,
    predict_heatmap,
    train_detector,
    fresh_detector,
)
from celladapt.pipeline import make_labeled

torch.set_num_threads(2)

TINY = TrainConfig(epochs=80, lr=1e-3, batch_size=4, seed=0, width=8, levels=3)


@pytest.fixture(scope="module")
def tiny_samples():
    pairs = generate_synthetic_dataset(tiny_round_spec(), 6, seed=21, size=32)
    return [make_labeled(p, pts, 4.0) for p, pts in pairs]


@pytest.fixture(scope="module")
def memorized(tiny_samples):
    one = tiny_samples[:1]
    cfg = TrainConfig(epochs=500, lr=1e-3, batch_size=1, seed=0, width=8, levels=3)
    return one, train_detector(None, one, cfg, sigma=4.0)


def test_single_sample_loss_decreases(memorized):
    _, model = memorized
    hist = model.training_meta["loss_history"]
    assert hist[-1] < hist[0]


def test_memorized_prediction_close_to_target(memorized):
    samples, model = memorized
    pred = predict_heatmap(model, samples[0].patch)
    mae = np.abs(pred.values - samples[0].heatmap.values).mean()
    assert mae < 5.0


def test_untrained_output_finite_and_clamped(tiny_samples):
    model = fresh_detector(TINY, sigma=4.0)
    pred = predict_heatmap(model, tiny_samples[0].patch)
    assert np.all(np.isfinite(pred.values))
    assert pred.values.min() >= 0.0 and pred.values.max() <= 255.0


def test_prediction_deterministic(memorized):
    samples, model = memorized
    a = predict_heatmap(model, samples[0].patch)
    b = predict_heatmap(model, samples[0].patch)
    np.testing.assert_array_equal(a.values, b.values)


def test_training_deterministic_given_seed(tiny_samples):
    cfg = TrainConfig(epochs=5, lr=1e-3, batch_size=4, seed=7, width=8, levels=3)
    m1 = train_detector(None, tiny_samples, cfg, sigma=4.0)
    m2 = train_detector(None, tiny_samples, cfg, sigma=4.0)
    p1 = predict_heatmap(m1, tiny_samples[0].patch)
    p2 = predict_heatmap(m2, tiny_samples[0].patch)
    np.testing.assert_array_equal(p1.values, p2.values)


def test_median_loss_drops_below_ten_percent():
    pairs = generate_synthetic_dataset(tiny_round_spec(), 24, seed=29, size=32)
    samples = [make_labeled(p, pts, 4.0) for p, pts in pairs]
    initials, finals = [], []
    for seed in range(5):
        cfg = TrainConfig(epochs=60, lr=1e-3, batch_size=4, seed=seed,
                          width=8, levels=3)
        model = train_detector(None, samples, cfg, sigma=4.0)
        hist = model.training_meta["loss_history"]
        initials.append(hist[0])
        finals.append(hist[-1])
    assert np.median(finals) < 0.1 * np.median(initials)


def test_empty_sample_list_rejected():
    with pytest.raises(ValueError):
        train_detector(None, [], TINY)


def test_diverged_training_reports_epoch(tiny_samples):
    cfg = TrainConfig(epochs=30, lr=1e12, batch_size=4, seed=0, width=8, levels=3)
    with pytest.raises(TrainingDivergedError) as err:
        train_detector(None, tiny_samples, cfg, sigma=4.0)
    assert err.value.epoch >= 0


def test_checkpoint_round_trip_bit_identical(memorized, tmp_path):
    samples, model = memorized
    path = tmp_path / "det.ckpt"
    model.save(path)
    back = DetectorModel.load(path)
    assert back.fingerprint == model.fingerprint
    a = predict_heatmap(model, samples[0].patch)
    b = predict_heatmap(back, samples[0].patch)
    np.testing.assert_array_equal(a.values, b.values)


def test_checkpoint_kind_mismatch_rejected(memorized, tmp_path):
    from celladapt.discriminator import DiscriminatorModel

    _, model = memorized
    path = tmp_path / "det.ckpt"
    model.save(path)
    with pytest.raises(ValueError):
        DiscriminatorModel.load(path)


def test_shape_mismatch_rejected(memorized):
    from celladapt.data import Patch

    _, model = memorized
    bad = Patch(pixels=np.zeros((30, 30)), source_id="bad")
    with pytest.raises(ValueError):
        predict_heatmap(model, bad)


def finite_difference_gradients(net, x, y, h=1e-5):
    """Central-difference gradient of the MSE loss for every parameter."""
    grads = []
    with torch.no_grad():
        for p in net.parameters():
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = mse_loss(net(x), y).item()
                flat[i] = orig - h
                down = mse_loss(net(x), y).item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    net = torch.nn.Sequential(
        torch.nn.Conv2d(1, 4, 3, padding=1),
        torch.nn.ReLU(),
        torch.nn.Conv2d(4, 1, 3, padding=1),
    ).double()
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64) * 255.0
    y = torch.rand(1, 1, 8, 8, dtype=torch.float64) * 255.0

    loss = mse_loss(net(x), y)
    loss.backward()
    analytic = [p.grad.clone() for p in net.parameters()]
    numeric = finite_difference_gradients(net, x, y)

    worst = 0.0
    for a, n in zip(analytic, numeric):
        rel = (a - n).abs() / torch.clamp(torch.maximum(a.abs(), n.abs()), min=1e-3)
        worst = max(worst, float(rel.max()))
    assert worst < 1e-4
