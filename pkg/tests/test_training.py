import math

import numpy as np
import pytest

from resvmamba import autodiff as ad
from resvmamba.autodiff import Tensor
from resvmamba.backbone import VMamba, preset
from resvmamba.training import (
    EmaState,
    OptimState,
    Schedule,
    Split,
    TrainConfig,
    adamw_step,
    ema_update,
    evaluate,
    label_smoothed_ce,
    lr_at,
    swapped_weights,
    top_k_accuracy,
    train_loop,
)
from resvmamba.verify import top_k_by_sorting


def smoothed_ce_oracle(logits, target, eps):
    z = np.asarray(logits, dtype=np.float64)
    logp = z - z.max() - math.log(np.exp(z - z.max()).sum())
    K = len(z)
    q = np.full(K, eps / K)
    q[target] += 1 - eps
    return -(q * logp).sum()


def test_smoothed_ce_matches_independent_oracle(f64):
    got = label_smoothed_ce(Tensor([[2.0, 0.0, 0.0, 0.0]]), [0], 0.1).item()
    assert got == pytest.approx(smoothed_ce_oracle([2, 0, 0, 0], 0, 0.1), abs=1e-12)
    assert got == pytest.approx(0.4907529539, abs=1e-9)


def test_smoothed_ce_uniform_logits_is_log_k(f64):
    assert label_smoothed_ce(Tensor(np.zeros((3, 5))), [0, 1, 4], 0.3).item() == pytest.approx(math.log(5))


def test_smoothed_ce_rejects_bad_targets():
    with pytest.raises(ValueError, match="outside"):
        label_smoothed_ce(Tensor(np.zeros((1, 3))), [3])
    with pytest.raises(ValueError):
        label_smoothed_ce(Tensor(np.zeros((1, 3))), [0], eps=1.0)


def adam_reference(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return p


def test_adamw_without_decay_is_adam(f64, rng):
    p0 = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) for _ in range(5)]
    p = Tensor(p0.copy())
    s = OptimState(weight_decay=0.0)
    for g in grads:
        adamw_step([p], [g], s, 1e-2)
    np.testing.assert_allclose(p.data, adam_reference(p0, grads, 1e-2), rtol=0, atol=1e-12)


def test_adamw_decay_is_decoupled(f64):
    p = Tensor(np.array([2.0]))
    adamw_step([p], [np.zeros(1)], OptimState(weight_decay=0.5), 0.1)
    assert p.item() == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_schedule_endpoints_and_continuity():
    s = Schedule(steps_per_epoch=10, warmup_epochs=2, total_epochs=10, lr_max=1e-3, lr_min=1e-5, warmup_init=1e-6)
    assert lr_at(0, s) == pytest.approx(1e-6)
    assert lr_at(20, s) == pytest.approx(1e-3)
    assert lr_at(100, s) == pytest.approx(1e-5)
    assert abs(lr_at(20, s) - lr_at(21, s)) < 1e-3 / 10 * 5
    lrs = [lr_at(t, s) for t in range(20, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_at(101, s)


def test_ema_arithmetic():
    e = EmaState([np.zeros(1)], decay=0.9)
    ema_update(e, [Tensor(np.ones(1))])
    assert e.shadow[0][0] == pytest.approx(0.1)


def test_swapped_weights_restores(rng):
    m = VMamba(preset("micro", num_classes=3), seed=0)
    before = [p.data.copy() for p in m.parameters()]
    with swapped_weights(m, [np.zeros_like(b) for b in before]):
        assert all((p.data == 0).all() for p in m.parameters())
    for p, b in zip(m.parameters(), before):
        np.testing.assert_array_equal(p.data, b)


def test_top_k_examples():
    z = np.array([[0.1, 0.9, 0.0], [0.8, 0.1, 0.1]])
    assert top_k_accuracy(z, [1, 2], 1) == 0.5
    assert top_k_accuracy(z, [1, 2], 3) == 1.0
    with pytest.raises(ValueError):
        top_k_accuracy(z, [1, 2], 4)


def test_top_k_ties_prefer_lower_index():
    z = np.zeros((1, 4))
    assert top_k_accuracy(z, [1], 2) == 1.0
    assert top_k_accuracy(z, [2], 2) == 0.0


def test_top_k_matches_full_sort(rng):
    z = rng.integers(-2, 3, size=(50, 10)).astype(float)
    y = rng.integers(0, 10, 50)
    for k in range(1, 11):
        assert top_k_accuracy(z, y, k) == top_k_by_sorting(z, y, k)


def tiny_split(rng, n, classes=3):
    return Split(rng.normal(size=(n, 3, 32, 32)).astype(np.float32), rng.integers(0, classes, n))


def test_one_epoch_two_steps(rng):
    records = []
    out = train_loop(
        VMamba(preset("micro", num_classes=3), seed=0),
        tiny_split(rng, 8),
        None,
        TrainConfig(epochs=2, warmup_epochs=0, batch_size=4),
        on_record=records.append,
    )
    assert out["steps"] == 4
    assert [r["step"] for r in records if r["kind"] == "step" and r["epoch"] == 1] == [1, 2]
    assert set(records[0]) == {"kind", "epoch", "step", "lr", "loss", "val_top1", "val_top5", "ema_top1", "ema_top5", "wall_time"}


def test_train_loop_reports_raw_and_ema_and_calls_best(rng):
    train, val = tiny_split(rng, 8), tiny_split(rng, 6)
    best = []
    out = train_loop(
        VMamba(preset("micro", num_classes=3), seed=0),
        train,
        val,
        TrainConfig(epochs=2, warmup_epochs=1, batch_size=4, ema_decay=0.5),
        on_best=lambda m, e, b: best.append(b["epoch"]),
    )
    assert best and best[0] == 1
    for key in ("val_top1", "val_top5", "ema_top1", "ema_top5"):
        assert 0.0 <= out["last"][key] <= 1.0


def test_training_is_deterministic(rng):
    data = tiny_split(rng, 8)

    def run():
        return train_loop(VMamba(preset("micro", num_classes=3), seed=3), data, None, TrainConfig(epochs=2, warmup_epochs=0, batch_size=4, seed=9))["losses"]

    assert run() == run()


def test_evaluate_clamps_k_to_class_count(rng):
    m = VMamba(preset("micro", num_classes=3), seed=0)
    res = evaluate(m, tiny_split(rng, 5), topk=(1, 5))
    assert res["top5"] == 1.0 and res["top1"] <= res["top5"]


def test_random_model_is_near_chance():
    from resvmamba.data import normalize, synth_images

    images, labels = synth_images(4, 64, 32, seed=5)
    acc = evaluate(VMamba(preset("nano", num_classes=4), seed=0), Split(normalize(images), labels), topk=(1,))["top1"]
    sigma = math.sqrt(0.25 * 0.75 / len(labels))
    assert abs(acc - 0.25) <= 3 * sigma
