import numpy as np
import pytest

from pointskip import synthetic
from pointskip.dataset import load_index
from pointskip.model import ModelConfig, StageConfig, init_params, is_trainable
from pointskip.training import (
    AUGMENT_ROWS,
    CheckpointError,
    EvalResult,
    StateError,
    TrainConfig,
    adam_step,
    evaluate,
    load_checkpoint,
    metrics_from_predictions,
    run_ablation,
    save_checkpoint,
    train,
)

from conftest import toy_config
from oracles import adam_scalar, confusion_oracle

FAST = TrainConfig(batch_size=16, epochs=2, n_points=64, seed=3)


# -- Adam ---------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = {"w": np.array([1.0, -2.0])}
    state = {}
    adam_step(p, {"w": np.array([0.5, 0.5])}, state, 1)
    before = p["w"].copy()
    m1 = state["m"]["w"].copy()
    adam_step(p, {"w": np.zeros(2)}, state, 2, lr=0.0)
    assert np.array_equal(p["w"], before)
    np.testing.assert_allclose(state["m"]["w"], 0.9 * m1)
    q = {"w": np.array([1.0, -2.0])}
    adam_step(q, {"w": np.zeros(2)}, {}, 1)
    assert np.array_equal(q["w"], [1.0, -2.0])


def test_adam_first_step_is_lr_times_sign():
    g = np.array([0.3, -5.0, 1e3, -0.1])
    p = {"w": np.zeros(4)}
    adam_step(p, {"w": g}, {}, 1, lr=0.01)
    np.testing.assert_allclose(p["w"], -0.01 * np.sign(g), rtol=1e-6)


def test_adam_matches_scalar_oracle():
    w = {"w": np.array([0.0])}
    state, trace = {}, []
    for t in range(1, 21):
        adam_step(w, {"w": 2 * (w["w"] - 3)}, state, t, lr=0.1)
        trace.append(float(w["w"][0]))
    ref = adam_scalar(lambda x: 2 * (x - 3), 0.0, 0.1, 20)
    np.testing.assert_allclose(trace, ref, rtol=1e-13)
    dist = [abs(x - 3) for x in trace]
    assert all(a > b for a, b in zip(dist, dist[1:]))


def test_adam_errors():
    with pytest.raises(StateError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, {}, 1)
    with pytest.raises(StateError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(2)}, {}, 0)


def test_cosine_schedule():
    tc = TrainConfig(epochs=10, learning_rate=0.001, min_lr=1e-5)
    assert tc.lr_at(0) == 0.001
    assert 1e-5 < tc.lr_at(9) < tc.lr_at(5) < 0.001
    assert TrainConfig(cosine=False).lr_at(150) == 0.001


# -- metrics ------------------------------------------------------------------


def test_perfect_predictions():
    r = metrics_from_predictions([0, 1, 2, 2], [0, 1, 2, 2], 3)
    assert r.overall_accuracy == 1 and r.mean_class_accuracy == 1
    assert np.array_equal(r.confusion, np.diag([1, 1, 2]))


def test_imbalanced_constant_classifier():
    r = metrics_from_predictions([0] * 9 + [1], [0] * 10, 2)
    assert r.overall_accuracy == 0.9 and r.mean_class_accuracy == 0.5


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_hand_tally(seed):
    rng = np.random.default_rng(seed)
    y, p = rng.integers(0, 3, 50).tolist(), rng.integers(0, 3, 50).tolist()
    conf, oa, macc = confusion_oracle(y, p, 3)
    r = metrics_from_predictions(y, p, 3)
    assert r.confusion.tolist() == conf
    assert r.overall_accuracy == oa and r.mean_class_accuracy == macc


def test_macc_skips_absent_classes():
    r = EvalResult.from_confusion([[2, 0, 0], [0, 0, 0], [1, 0, 1]])
    assert r.mean_class_accuracy == 0.75


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = toy_config(4, class_names=("a", "b", "c", "d"))
    params = init_params(cfg, 0)
    for t in params.values():
        t.data[...] = np.random.default_rng(1).normal(size=t.data.shape)
    save_checkpoint(params, cfg, tmp_path / "a.pskn")
    back, cfg2 = load_checkpoint(tmp_path / "a.pskn")
    assert cfg2 == cfg and list(back) == list(params)
    for k in params:
        assert np.array_equal(back[k].data, params[k].data)
        assert back[k].requires_grad == is_trainable(k)
    save_checkpoint(back, cfg2, tmp_path / "b.pskn")
    assert (tmp_path / "a.pskn").read_bytes() == (tmp_path / "b.pskn").read_bytes()


def test_checkpoint_defects(tmp_path):
    cfg = toy_config(2)
    save_checkpoint(init_params(cfg), cfg, tmp_path / "ok.pskn")
    raw = (tmp_path / "ok.pskn").read_bytes()
    cases = {
        "trunc_head": raw[:6], "trunc_mid": raw[: len(raw) // 2], "trunc_end": raw[:-1],
        "magic": b"XXXX" + raw[4:], "version": raw[:4] + b"\x09\x00\x00\x00" + raw[8:],
        "trailing": raw + b"\x00",
    }
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.pskn")


def test_loaded_checkpoint_evaluates_identically(tmp_path, shape_index):
    cfg = toy_config(4)
    params = init_params(cfg, 5)
    save_checkpoint(params, cfg, tmp_path / "m.pskn")
    back, cfg2 = load_checkpoint(tmp_path / "m.pskn")
    a = evaluate(shape_index, "test", params, cfg, 64, 8, 0)
    b = evaluate(shape_index, "test", back, cfg2, 64, 8, 0)
    assert np.array_equal(a.confusion, b.confusion)


# -- training loop ------------------------------------------------------------


def test_zero_learning_rate_leaves_weights(shape_index):
    cfg = toy_config(4)
    start = init_params(cfg, FAST.seed)
    res = train(shape_index, cfg, TrainConfig(batch_size=16, epochs=1, n_points=64, seed=3,
                                              learning_rate=0.0))
    for k, t in res.params.items():
        if is_trainable(k):
            assert np.array_equal(t.data, start[k].data), k


def test_training_is_deterministic(tmp_path, shape_index):
    cfg = toy_config(4, dropout_rate=0.4)
    a = train(shape_index, cfg, FAST, out_dir=tmp_path / "a")
    b = train(shape_index, cfg, FAST, out_dir=tmp_path / "b")
    assert [r.train_loss for r in a.log] == [r.train_loss for r in b.log]
    for name in ("log.csv", "best.pskn", "last.pskn"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = (tmp_path / "a" / "log.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_loss,train_oa,eval_oa,eval_macc" and len(rows) == 3


def test_training_reduces_loss(shape_index):
    res = train(shape_index, toy_config(4), TrainConfig(batch_size=16, epochs=6, n_points=64,
                                                         learning_rate=0.01))
    assert res.log[-1].train_loss < res.log[0].train_loss


def test_overfit_loss_smoothed_monotone(tmp_path):
    # dropout noise dominates once the loss is near zero, so this property is
    # checked on the dropout-free variant of the overfit task
    synthetic.write_synthetic_dataset(tmp_path, ["sphere", "cube", "plate", "cylinder"], 8, 0,
                                      seed=5)
    cfg = ModelConfig(
        stages=(StageConfig(64, 0.3, 16, (16, 16, 32), 32),
                StageConfig(16, 0.6, 16, (32, 32, 64), 64)),
        global_widths=(128,), fc_widths=(64,), n_classes=4, dropout_rate=0.0)
    res = train(load_index(tmp_path), cfg, TrainConfig(batch_size=32, epochs=200, n_points=256),
                eval_every=200)
    windows = np.array([r.train_loss for r in res.log]).reshape(20, 10).mean(axis=1)
    assert np.all(np.diff(windows) <= 0)


def test_class_count_mismatch(shape_index):
    with pytest.raises(ValueError):
        train(shape_index, toy_config(2), FAST)


# -- ablations ----------------------------------------------------------------


@pytest.mark.parametrize("kind,rows", [
    ("skip_mode", ["concatenation", "addition"]),
    ("augmentation", list(AUGMENT_ROWS)),
])
def test_ablation_row_sets(tmp_path, shape_index, kind, rows):
    out = tmp_path / f"{kind}.csv"
    res = run_ablation(kind, shape_index, toy_config(4),
                       TrainConfig(batch_size=16, epochs=1, n_points=64), out)
    assert [r.mode for r in res] == rows
    lines = out.read_text().splitlines()
    assert lines[0] == "mode,oa,macc"
    assert [l.split(",")[0] for l in lines[1:]] == rows
    for r in res:
        assert 0 <= r.result.overall_accuracy <= 1 and 0 <= r.result.mean_class_accuracy <= 1


def test_augmentation_rows_order_matches_reference():
    assert AUGMENT_ROWS == ("none", "all", "anisotropic_scaling", "jitter", "rotation",
                            "translation")
