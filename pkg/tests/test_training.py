import math
from statistics import fmean

import numpy as np
import pytest

from treeagree import training as T
from treeagree.grammar import builtin_vocab, gen_corpus, load_builtin_grammar
from treeagree.models import init_params
from treeagree import numcore as nc


@pytest.fixture(scope="module")
def tiny():
    g = load_builtin_grammar("test")
    train = gen_corpus(g, 40, 0, balance=True)
    val = gen_corpus(g, 12, 1, balance=True, exclude={e.sentence for e in train})
    return train, val


def small_config(**kw):
    base = dict(d_emb=4, d_h=3, eval_every_n_sentences=10, max_epochs=2, seeds=(0,))
    base.update(kw)
    return T.TrainConfig(**base)


def test_bce_loss_values():
    assert math.isclose(T.bce_loss(0.5, 1), math.log(2))
    assert math.isclose(T.bce_loss(0.5, 0), math.log(2))
    assert T.bce_loss(1.0, 1) < 1e-11 and T.bce_loss(0.0, 0) < 1e-11
    assert math.isfinite(T.bce_loss(0.0, 1))


def test_bce_derivative():
    p = nc.param("p", np.array([0.25]))
    assert math.isclose(nc.backward(nc.bce(p, 1))["p"][0], -4.0)


def test_config_must_be_positive():
    with pytest.raises(ValueError, match="early_stop_window"):
        T.TrainConfig(early_stop_window=0)
    with pytest.raises(ValueError):
        T.TrainConfig(learning_rate=-1.0)


@pytest.mark.parametrize("g", [1.0, 1000.0, -0.001, 3e-7])
def test_adam_first_step_is_lr(g):
    params = {"w": np.array([2.0])}
    T.adam_step(params, {"w": np.array([g])}, T.AdamState(), 0.001)
    step = 2.0 - params["w"][0]
    assert math.isclose(abs(step), 0.001 * abs(g) / (abs(g) + 1e-8), rel_tol=1e-9)
    assert np.sign(step) == np.sign(g)


def test_adam_zero_gradient_is_identity():
    params = {"w": np.array([1.0, -2.0])}
    state = T.AdamState()
    for _ in range(10):
        T.adam_step(params, {"w": np.zeros(2)}, state, 0.01)
    assert np.array_equal(params["w"], [1.0, -2.0])
    assert state.t == 10


def test_adam_rejects_non_finite():
    with pytest.raises(FloatingPointError, match="W_i"):
        T.adam_step({"W_i": np.zeros(2)}, {"W_i": np.array([np.nan, 0.0])}, T.AdamState(), 0.1)


def test_early_stop_examples():
    assert T.early_stop_check([.5] * 6, 0.0005, 5)
    assert not T.early_stop_check([.6 - .01 * k for k in range(6)], 0.0005, 5)
    assert not T.early_stop_check([.6, .58, .59, .585, .584, .5838], 0.0005, 5)
    assert not T.early_stop_check([.5] * 5, 0.0005, 5)


def test_early_stop_accepts_records():
    recs = [T.EvalRecord(k, 0.3, 0.5) for k in range(6)]
    assert T.early_stop_check(recs, 0.0005, 5)


def test_flat_validation_stops_after_window_plus_one(tiny, monkeypatch):
    monkeypatch.setattr(T, "evaluate", lambda bundle, exs: (0.5, 0.5))
    train, val = tiny
    cfg = small_config(eval_every_n_sentences=2, max_epochs=50)
    bundle = init_params("bilstm", builtin_vocab(), 4, 3, 0)
    _, history = T.train("bilstm", bundle, train, val, cfg, 0)
    assert len(history) == cfg.early_stop_window + 1
    assert history[-1].sentences_seen == 12


def test_train_is_deterministic_and_keeps_best(tiny):
    train, val = tiny
    cfg = small_config()
    bundle = init_params("constituency", builtin_vocab(), 4, 3, 0)
    before = {k: v.copy() for k, v in bundle.arrays.items()}
    a, hist = T.train("constituency", bundle, train, val, cfg, 7)
    b, _ = T.train("constituency", bundle, train, val, cfg, 7)
    for k in bundle.arrays:
        assert np.array_equal(bundle.arrays[k], before[k])
        assert a.arrays[k].tobytes() == b.arrays[k].tobytes()
    losses = [r.validation_loss for r in hist]
    assert a.meta["best_validation_loss"] == min(losses) <= losses[-1]
    assert T.evaluate(a, val)[0] == min(losses)
    assert [r.sentences_seen for r in hist] == [10 * (k + 1) for k in range(len(hist))]
    assert len(hist) <= 2 * len(train) // cfg.eval_every_n_sentences
    assert all(r.validation_loss >= 0 and 0 <= r.validation_accuracy <= 1 for r in hist)


def test_train_rejects_bad_inputs(tiny):
    train, val = tiny
    bundle = init_params("bilstm", builtin_vocab(), 4, 3, 0)
    with pytest.raises(ValueError):
        T.train("dependency", bundle, train, val, small_config(), 0)
    with pytest.raises(ValueError):
        T.train("bilstm", bundle, [], val, small_config(), 0)


def test_fine_tune_one_epoch():
    aug = gen_corpus(load_builtin_grammar("augmentation"), 500, 2, balance=True)
    bundle = init_params("dependency", builtin_vocab(), 3, 2, 0)
    cfg = small_config(d_emb=3, d_h=2)
    a = T.fine_tune(bundle, aug, cfg, rng_seed=1)
    b = T.fine_tune(bundle, aug, cfg, rng_seed=1)
    assert a.meta["fine_tune_updates"] == 500
    assert any(not np.array_equal(a.arrays[k], bundle.arrays[k]) for k in bundle.arrays)
    assert np.array_equal(a.arrays["embedding"], bundle.arrays["embedding"])
    for k in a.arrays:
        assert a.arrays[k].tobytes() == b.arrays[k].tobytes()


def test_fine_tune_frozen_model_is_unchanged(tiny):
    train, _ = tiny
    bundle = init_params("headlex", builtin_vocab(), 3, 2, 0)
    bundle.frozen = frozenset(bundle.arrays)
    out = T.fine_tune(bundle, train, small_config(d_emb=3, d_h=2))
    assert out.meta["fine_tune_updates"] == len(train)
    for k in bundle.arrays:
        assert np.array_equal(out.arrays[k], bundle.arrays[k])
    with pytest.raises(ValueError):
        T.fine_tune(bundle, [], small_config())


def _spec(tiny, seeds):
    train, val = tiny
    return T.RunSpec(models=("bilstm", "dependency"), train_set=train, val_set=val,
                     test_sets={"val": val, "train": train}, vocab=builtin_vocab(),
                     config=small_config(seeds=seeds, max_epochs=1))


def test_multi_seed_mean_arithmetic(tiny):
    run = T.multi_seed_run(_spec(tiny, (0, 1, 2)))
    for m in ("bilstm", "dependency"):
        for split in ("val", "train"):
            accs = [r[4] for r in run.rows if r[0] == m and r[2] == split and r[1] != "mean"]
            assert len(accs) == 3
            assert run.mean(m, split) == fmean(accs)
    assert len(run.rows) == 2 * 2 * 4
    assert set(run.checkpoints) == {(m, s) for m in ("bilstm", "dependency") for s in (0, 1, 2)}


def test_multi_seed_single_and_identical(tiny):
    one = T.multi_seed_run(_spec(tiny, (4,)))
    row = [r for r in one.rows if r[0] == "bilstm" and r[2] == "val"]
    assert row[0][4] == row[1][4] and row[1][1] == "mean"
    same = T.multi_seed_run(_spec(tiny, (4, 4, 4)))
    assert T.seed_spread(same.rows, "bilstm", "val") == 0.0
    assert same.mean("bilstm", "val") == one.mean("bilstm", "val")
