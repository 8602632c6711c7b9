import math
import statistics
from fractions import Fraction

import numpy as np
import pytest
import torch
from PIL import Image

from denrescov.datasets import DatasetManifest, ImageSample, monte_carlo_split
from denrescov.errors import ConfigError, InputError, NumericError
from denrescov.fusion import FusionModelConfig, build_fusion_model
from denrescov.metrics import SUMMARY_ROWS
from denrescov.preprocess import AugmentationSpec
from denrescov.synthetic import make_pattern_dataset
from denrescov.training import (
    ImageCache,
    MomentumSGD,
    TrainConfig,
    cross_entropy_loss,
    cross_validate,
    fit,
    l2_penalty,
    load_train_config,
    majority_factory,
    save_train_config,
    train_arrays,
)

TINY = FusionModelConfig(backbone_scale=Fraction(1, 8), input_size=32)


def tiny(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = FusionModelConfig(**{**TINY.__dict__, **kw})
    return build_fusion_model(cfg)


def pattern_arrays(n_per_class=3, size=32, seed=0):
    from denrescov.preprocess import prepare_image

    grids, labels = make_pattern_dataset(n_per_class, size=size, seed=seed)
    return np.stack([prepare_image(g, size) for g in grids]).astype(np.float32), np.array(labels)


# ------------------------------------------------------------------- loss


def test_loss_uniform_is_log_k():
    probs = np.full((5, 4), 0.25)
    assert math.isclose(cross_entropy_loss(probs, [0, 1, 2, 3, 1]), -math.log(0.25 + 1e-12), rel_tol=1e-14)
    assert math.isclose(cross_entropy_loss(probs, [0, 1, 2, 3, 1]), math.log(4), rel_tol=1e-11)


def test_loss_exact_match_is_near_zero():
    eye = np.eye(3)
    assert abs(cross_entropy_loss(eye, eye)) <= 1e-11


def test_loss_binary_example():
    assert math.isclose(cross_entropy_loss([[0.7, 0.3]], [[1, 0]]), -math.log(0.7 + 1e-12), rel_tol=1e-14)
    assert math.isclose(-math.log(0.7), 0.356675, abs_tol=1e-6)


def test_loss_torch_matches_numpy_and_adds_penalty():
    p = np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]])
    y = np.array([1, 0])
    t = cross_entropy_loss(torch.tensor(p), torch.tensor(y), 0.25)
    assert math.isclose(float(t), cross_entropy_loss(p, y) + 0.25, rel_tol=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(InputError):
        cross_entropy_loss(np.full((2, 3), 1 / 3), np.eye(2))


def test_l2_penalty_counts_kernels_only():
    model = tiny()
    expected = sum(
        float((m.weight.detach().double() ** 2).sum())
        for m in model.modules()
        if isinstance(m, (torch.nn.Conv2d, torch.nn.Linear))
    )
    assert math.isclose(float(l2_penalty(model, 1.0).detach()), expected, rel_tol=1e-5)
    assert l2_penalty(model, 0.0) == 0.0


# -------------------------------------------------------------- optimizer


def test_momentum_matches_hand_stepped_quadratic():
    # f(a, b) = 3a^2 + 0.5b^2, gradient (6a, b)
    theta = torch.tensor([1.0, -2.0], dtype=torch.float64, requires_grad=True)
    opt = MomentumSGD([theta], lr=0.1, momentum=0.9)
    a, b, va, vb = 1.0, -2.0, 0.0, 0.0
    for _ in range(5):
        opt.zero_grad()
        (3 * theta[0] ** 2 + 0.5 * theta[1] ** 2).backward()
        opt.step()
        va, vb = 0.9 * va - 0.1 * 6 * a, 0.9 * vb - 0.1 * b
        a, b = a + va, b + vb
        assert theta.detach().tolist() == pytest.approx([a, b], rel=1e-14, abs=1e-14)


def test_single_step_decreases_batch_loss():
    model = tiny().double().train()
    x, y = pattern_arrays(2)
    x = torch.from_numpy(x).double().permute(0, 3, 1, 2)
    y = torch.from_numpy(y)
    opt = MomentumSGD(model.parameters(), lr=1e-5, momentum=0.0)
    loss = cross_entropy_loss(model(x), y, l2_penalty(model, 1e-4))
    opt.zero_grad()
    loss.backward()
    opt.step()
    with torch.no_grad():
        after = cross_entropy_loss(model(x), y, l2_penalty(model, 1e-4))
    assert float(after) < loss.item()


# ------------------------------------------------------------------ train


def test_zero_learning_rate_leaves_parameters_unchanged():
    model = tiny()
    before = {k: v.clone() for k, v in model.named_parameters()}
    x, y = pattern_arrays(2)
    cfg = TrainConfig(learning_rate=0.0, epochs=3, batch_size=len(y), augmentation=AugmentationSpec.identity())
    hist = train_arrays(model, x, y, cfg)
    for k, v in model.named_parameters():
        assert torch.equal(v, before[k])
    assert max(hist.loss) - min(hist.loss) < 1e-5 * hist.loss[0]
    assert len(hist) == 3


def test_same_seed_identical_history():
    x, y = pattern_arrays(2)
    cfg = TrainConfig(epochs=2, batch_size=4, seed=11)
    h1 = train_arrays(tiny(), x, y, cfg)
    h2 = train_arrays(tiny(), x, y, cfg)
    assert h1.to_csv(timing=False) == h2.to_csv(timing=False)
    h3 = train_arrays(tiny(), x, y, TrainConfig(epochs=2, batch_size=4, seed=12))
    assert h3.to_csv(timing=False) != h1.to_csv(timing=False)


def test_history_csv_columns():
    x, y = pattern_arrays(1)
    hist = train_arrays(tiny(), x, y, TrainConfig(epochs=2, batch_size=2))
    lines = hist.to_csv().splitlines()
    assert lines[0] == "epoch,loss,acc,seconds"
    assert [line.split(",")[0] for line in lines[1:]] == ["1", "2"]
    assert all(math.isfinite(v) for v in hist.loss)


def test_nan_loss_reports_epoch_batch_lr():
    model = tiny()
    with torch.no_grad():
        model.head_out.bias.fill_(float("nan"))
    x, y = pattern_arrays(1)
    with pytest.raises(NumericError, match=r"epoch 1, batch 1 \(lr=0.001\)"):
        train_arrays(model, x, y, TrainConfig(epochs=1))


def test_freeze_backbones():
    model = tiny()
    before = {k: v.clone() for k, v in model.named_parameters()}
    x, y = pattern_arrays(1)
    train_arrays(model, x, y, TrainConfig(epochs=1, batch_size=4, freeze_backbones=True))
    for k, v in model.named_parameters():
        frozen = k.startswith(("resnet.", "densenet."))
        assert torch.equal(v, before[k]) == frozen, k


def test_train_input_errors():
    x, y = pattern_arrays(1)
    with pytest.raises(InputError):
        train_arrays(tiny(), x, y + 4, TrainConfig(epochs=1))
    with pytest.raises(InputError):
        train_arrays(tiny(), x, y[:-1], TrainConfig(epochs=1))


@pytest.mark.parametrize(
    "kwargs", [dict(learning_rate=-1.0), dict(epochs=0), dict(batch_size=0), dict(momentum=1.0),
               dict(l2_coefficient=-1e-4)]
)
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_train_config_defaults_and_round_trip(tmp_path):
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.momentum, cfg.epochs, cfg.batch_size) == (0.001, 0.9, 30, 16)
    save_train_config(TrainConfig(seed=4, augmentation=AugmentationSpec(zca_whitening=True)), tmp_path / "t.json")
    back = load_train_config(tmp_path / "t.json")
    assert back == TrainConfig(seed=4, augmentation=AugmentationSpec(zca_whitening=True))


# --------------------------------------------------------- manifest level


def write_images(root, n_per_class, classes=("covid", "pneumonia", "tb", "healthy"), size=32, seed=0):
    grids, labels = make_pattern_dataset(n_per_class, size=size, num_classes=len(classes), seed=seed)
    samples = []
    root.mkdir(parents=True, exist_ok=True)
    for i, (g, lab) in enumerate(zip(grids, labels)):
        path = root / f"img{i:04d}.png"
        Image.fromarray((np.clip(g, 0, 1) * 255).astype(np.uint8)).save(path)
        samples.append(ImageSample(f"img{i:04d}", str(path), classes[lab], "synthetic"))
    return DatasetManifest("synthetic", list(classes), samples)


def test_fit_on_manifest(tmp_path):
    m = write_images(tmp_path, 2)
    model, hist = fit(tiny(), m, TrainConfig(epochs=1, batch_size=4))
    assert len(hist) == 1 and not model.training
    with pytest.raises(ConfigError):
        fit(tiny(num_classes=3), m, TrainConfig(epochs=1))
    with pytest.raises(InputError):
        fit(tiny(), m.subset([]), TrainConfig(epochs=1))


def blank_loader(path):
    return np.zeros((8, 8))


def stub_cv(manifest, folds=4, seed=0, **kw):
    plan = monte_carlo_split(manifest, folds=folds, seed=seed)
    cfg = FusionModelConfig(**{**TINY.__dict__, "num_classes": len(manifest.classes)})
    cache = ImageCache(32, loader=blank_loader)
    return plan, cross_validate(manifest, plan, cfg, TrainConfig(epochs=1), majority_factory, cache, **kw)


def label_manifest(counts, classes=("a", "b", "c", "d")):
    samples = [ImageSample(f"s{i:04d}", f"x{i}.png", lab, "synthetic")
               for i, lab in enumerate(np.repeat(classes, counts))]
    return DatasetManifest("labels", list(classes), samples)


def test_cross_validation_summary_matches_recomputation():
    m = label_manifest([30, 45, 12, 20])
    _, (results, summary) = stub_cv(m)
    assert [r.fold for r in results] == [1, 2, 3, 4]
    for label, path in SUMMARY_ROWS:
        values = [r.report.value(path) for r in results]
        assert summary.rows[label] == values
        assert abs(summary.mean[label] - statistics.fmean(values)) <= 1e-12
        assert abs(summary.sd[label] - statistics.stdev(values)) <= 1e-12
    assert np.array_equal(summary.combined_confusion, sum(r.report.confusion for r in results))


def test_single_fold_sd_zero():
    _, (results, summary) = stub_cv(label_manifest([10, 10, 10, 10]), folds=1)
    for label, _ in SUMMARY_ROWS:
        assert summary.sd[label] == 0.0
        assert summary.mean[label] == summary.rows[label][0]


def test_stub_accuracy_near_chance_on_balanced_data():
    m = label_manifest([100, 100, 100, 100])
    _, (results, _) = stub_cv(m)
    n_test = 120
    sd = math.sqrt(0.25 * 0.75 / n_test)
    for r in results:
        assert abs(r.report.accuracy - 0.25) < 4 * sd


def test_stub_predicts_training_majority():
    m = label_manifest([10, 40, 5, 5])
    plan, (results, _) = stub_cv(m, folds=2)
    for (train, test), r in zip(plan.folds, results):
        sub = m.subset(test)
        majority = np.bincount(m.subset(train).labels_index(), minlength=4).argmax()
        expected = np.mean(np.array(sub.labels_index()) == majority)
        assert r.report.accuracy == expected
        assert r.report.aggregates["f1"]["micro"] == pytest.approx(expected, abs=1e-15)


def test_fold_order_does_not_change_results(tmp_path):
    m = write_images(tmp_path, 2)
    plan = monte_carlo_split(m, folds=3, seed=1)
    cfg = FusionModelConfig(**TINY.__dict__)
    tc = TrainConfig(epochs=1, batch_size=4)
    cache = ImageCache(32)
    a, _ = cross_validate(m, plan, cfg, tc, cache=cache)
    b, _ = cross_validate(m, plan, cfg, tc, cache=cache, fold_order=[2, 0, 1])
    for ra, rb in zip(a, b):
        assert ra.fold == rb.fold
        assert ra.report.to_dict() == rb.report.to_dict()
        assert ra.history.to_csv(timing=False) == rb.history.to_csv(timing=False)


def test_parallel_folds_match_serial(tmp_path):
    m = write_images(tmp_path, 2)
    plan = monte_carlo_split(m, folds=2, seed=2)
    cfg = FusionModelConfig(**TINY.__dict__)
    tc = TrainConfig(epochs=1, batch_size=4)
    serial, _ = cross_validate(m, plan, cfg, tc)
    parallel, _ = cross_validate(m, plan, cfg, tc, jobs=2)
    for a, b in zip(serial, parallel):
        assert a.report.to_dict() == b.report.to_dict()
