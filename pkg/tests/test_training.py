import json
import math

import numpy as np
import pytest

from ctxseq.data import AugmentationConfig, synth_lookup_task
from ctxseq.errors import ConfigError, NumericError
from ctxseq.model import ModelConfig, Seq2SeqModel, read_checkpoint
from ctxseq.training import AdamState, TrainConfig, adam_step, clip_by_global_norm, evaluate_ppl, lr_at, train


def test_schedule_examples():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 1e-7
    assert abs(lr_at(4000, cfg) - 1e-4) < 1e-18
    assert abs(lr_at(16000, cfg) - 5e-5) < 1e-18
    assert abs(lr_at(3999, cfg) - lr_at(4000, cfg)) < 1e-7
    assert all(lr_at(s, cfg) < lr_at(s + 1, cfg) for s in range(0, 4000, 97))
    assert all(lr_at(s, cfg) > lr_at(s + 1, cfg) for s in range(4000, 20000, 997))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(warmup_steps=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_peak=1e-8)


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    assert state.step == 1
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_constant_gradient_step_tends_to_lr():
    p = {"w": np.array([0.0])}
    state = AdamState()
    for _ in range(500):
        before = p["w"].copy()
        adam_step(p, {"w": np.array([3.0])}, state, lr=0.01)
    assert abs((before - p["w"])[0] - 0.01) < 1e-6


def reference_adam(theta, lr, steps, b1=0.9, b2=0.98, eps=1e-9):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = 2 * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(theta)
    return out


def test_adam_on_quadratic_matches_scalar_reference():
    p = {"w": np.array([1.0])}
    state = AdamState()
    path = []
    for _ in range(10):
        adam_step(p, {"w": 2 * p["w"]}, state, lr=0.1)
        path.append(p["w"][0])
    np.testing.assert_allclose(path, reference_adam(1.0, 0.1, 10), rtol=1e-14)
    assert all(a > b for a, b in zip(path, path[1:]))
    assert path[-1] < 1.0


def test_adam_nan_names_parameter():
    with pytest.raises(NumericError, match="encoder.0.ff.w1"):
        adam_step({"encoder.0.ff.w1": np.ones(2)}, {"encoder.0.ff.w1": np.array([np.nan, 0.0])}, AdamState(), 0.1)


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_by_global_norm(grads, 1.0) == 5.0
    assert abs(np.sqrt(grads["a"] ** 2 + grads["b"] ** 2)[0] - 1.0) < 1e-9
    small = {"a": np.array([0.1])}
    clip_by_global_norm(small, 1.0)
    assert small["a"][0] == 0.1


@pytest.fixture(scope="module")
def tiny_task():
    return synth_lookup_task(3, 2, 300, seed=0, n_values=4)


def tiny_model(task, seed=0, strategy="interleave"):
    cfg = ModelConfig(vocab_size=len(task.vocab), d_model=16, ffn_dim=32, strategy=strategy)
    return Seq2SeqModel(cfg, seed=seed)


def tiny_cfg(**kw):
    base = dict(lr_peak=3e-3, warmup_steps=10, batch_size=16, max_steps=40, validate_every=20, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_training_is_bitwise_deterministic(tiny_task, tmp_path):
    cfg = tiny_cfg(augmentation=AugmentationConfig(0.3, 0.2, 5))
    a = train(tiny_model(tiny_task), tiny_task.train, tiny_task.valid, cfg, out_dir=tmp_path / "a")
    b = train(tiny_model(tiny_task), tiny_task.train, tiny_task.valid, cfg, out_dir=tmp_path / "b")
    assert [r.get("loss") for r in a.log] == [r.get("loss") for r in b.log]
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


def test_training_reduces_loss_and_logs(tiny_task, tmp_path):
    model = tiny_model(tiny_task)
    before = evaluate_ppl(model, tiny_task.valid)
    result = train(model, tiny_task.train, tiny_task.valid, tiny_cfg(max_steps=60), out_dir=tmp_path)
    assert result.best_valid_ppl < before
    lines = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    steps = [l for l in lines if "loss" in l]
    assert len(steps) == 60
    assert set(steps[0]) == {"step", "loss", "ppl", "lr"}
    assert [l["step"] for l in lines if "valid_ppl" in l] == [20, 40, 60]
    header, params = read_checkpoint(result.checkpoint)
    assert header["model_config"]["strategy"] == "interleave"
    assert abs(evaluate_ppl(model, tiny_task.valid) - result.best_valid_ppl) < 1e-12


def test_validation_ppl_is_exp_mean_token_nll(tiny_task):
    model = tiny_model(tiny_task, seed=3)
    examples = tiny_task.valid[:10]
    total = count = 0
    for ex in examples:
        loss, n = model.forward_loss([ex])
        total += loss.item() * n
        count += n
    assert abs(evaluate_ppl(model, examples, batch_size=3) - math.exp(total / count)) < 1e-9


def test_warm_start_from_sequential_checkpoint(tiny_task, tmp_path):
    seq = tiny_model(tiny_task, strategy="sequential")
    train(seq, tiny_task.train, tiny_task.valid, tiny_cfg(max_steps=5), out_dir=tmp_path / "seq")
    inter = tiny_model(tiny_task, seed=9, strategy="interleave")
    cfg = tiny_cfg(max_steps=0, init_checkpoint=str(tmp_path / "seq" / "model.ckpt"))
    train(inter, tiny_task.train, tiny_task.valid, cfg)
    assert np.array_equal(inter.params["encoder.0.ff.w1"].data, seq.params["encoder.0.ff.w1"].data)


def test_empty_training_set_rejected(tiny_task):
    with pytest.raises(ConfigError):
        train(tiny_model(tiny_task), [], tiny_task.valid, tiny_cfg())
