import math

import numpy as np
import pytest

from partlab import training
from partlab.autodiff import ContractError, Tensor
from partlab.data import AugmentationConfig, assemble, batches, make_partial, synthesize_digits
from partlab.evaluation import ClassMetrics
from partlab.model import ModelConfig, init_model
from partlab.training import (Adam, EarlyStop, NumericalError, PlateauScheduler, TrainConfig, fit,
                              make_optimizer, train_step)

SMALL = ModelConfig(hidden_dim=32, feature_dim=16)


@pytest.fixture(scope="module")
def corpus():
    train = synthesize_digits(10, seed=21, name="train")
    valid = synthesize_digits(5, seed=22, name="valid")
    return assemble([train]), assemble([valid])


@pytest.fixture(scope="module")
def partial():
    a = make_partial(synthesize_digits(4, seed=1), {"1", "3", "5", "7", "9"}, name="D0")
    b = make_partial(synthesize_digits(4, seed=2), {"0", "2", "4", "6", "8"}, name="D1")
    return assemble([a, b])


def test_adam_first_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad[...] = 2.0
    opt.step()
    assert p.values[0] == pytest.approx(0.9, abs=1e-7)
    assert opt.step_count == 1


def test_adam_matches_reference_formula():
    rng = np.random.default_rng(0)
    p = Tensor(rng.normal(size=4), requires_grad=True)
    ref, m, v = p.values.copy(), np.zeros(4), np.zeros(4)
    opt = Adam([p], lr=0.01)
    for t in range(1, 6):
        g = rng.normal(size=4)
        p.grad[...] = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.values, ref, rtol=1e-13)


def test_scheduler_frozen_metric_trace():
    p = Tensor(np.zeros(1), requires_grad=True)
    opt = Adam([p], lr=1.0)
    sched, stop = PlateauScheduler(opt), EarlyStop()
    lrs, stopped_at = [], None
    for epoch in range(1, 30):
        lrs.append(opt.learning_rate)
        sched.step(0.5)
        if stop.step(0.5):
            stopped_at = epoch
            break
    # epoch 7 is the 6th epoch without improvement: lr halves after it
    assert lrs[:7] == [1.0] * 7 and lrs[7] == 0.5
    assert stopped_at == 11


def test_scheduler_improving_never_decays():
    opt = Adam([Tensor(np.zeros(1), requires_grad=True)], lr=1.0)
    sched, stop = PlateauScheduler(opt), EarlyStop()
    for i in range(64):
        sched.step(i)
        assert not stop.step(i)
    assert opt.learning_rate == 1.0


def test_lr_sequence_halves_only():
    opt = Adam([Tensor(np.zeros(1), requires_grad=True)], lr=0.8)
    sched = PlateauScheduler(opt)
    seen = [opt.learning_rate]
    for metric in [1, 0, 0, 0, 0, 0, 0, 2, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1]:
        sched.step(metric)
        if opt.learning_rate != seen[-1]:
            seen.append(opt.learning_rate)
    assert all(b == a / 2.0 for a, b in zip(seen, seen[1:])) and len(seen) >= 3


class _Scripted:
    """Stand-in for evaluate() returning a scripted validation mAUC."""

    def __init__(self, values):
        self.values = list(values)
        self.calls = 0
        self.snapshots = []

    def __call__(self, state, d):
        self.snapshots.append(state.snapshot())
        v = self.values[min(self.calls, len(self.values) - 1)]
        self.calls += 1
        return ClassMetrics(d.schema, {c: v for c in d.schema})


def test_fit_frozen_metric(monkeypatch, corpus):
    train, valid = corpus
    monkeypatch.setattr(training, "evaluate", _Scripted([0.5]))
    state = init_model(train.schema, SMALL, seed=0)
    run = fit(state, train.take(range(20)), valid, TrainConfig(batch_size=10))
    assert len(run.epochs) == 11 and run.stopped_early
    lrs = [r.lr for r in run.epochs]
    assert lrs[:7] == [2e-4] * 7 and lrs[7:] == [1e-4] * 4
    assert run.best_epoch == 1


def test_fit_restores_best_epoch(monkeypatch, corpus):
    train, valid = corpus
    # pre-check, then epochs 1..5, then the final evaluation
    script = _Scripted([0.5, 0.6, 0.8, 0.9, 0.9, 0.7, 0.0])
    monkeypatch.setattr(training, "evaluate", script)
    state = init_model(train.schema, SMALL, seed=0)
    run = fit(state, train.take(range(20)), valid, TrainConfig(max_epochs=5, batch_size=10))
    assert run.best_epoch == 3 and run.best_mauc == 0.9
    for now, best in zip(state.snapshot(), script.snapshots[3]):
        assert now.tobytes() == best.tobytes()


def test_fit_runs_max_epochs_when_improving(monkeypatch, corpus):
    train, valid = corpus
    monkeypatch.setattr(training, "evaluate", _Scripted(np.linspace(0.1, 0.9, 20)))
    state = init_model(train.schema, SMALL, seed=0)
    run = fit(state, train.take(range(10)), valid, TrainConfig(max_epochs=8, batch_size=10))
    assert len(run.epochs) == 8 and not run.stopped_early
    assert {r.lr for r in run.epochs} == {2e-4}


def test_fit_requires_evaluable_validation(corpus):
    train, valid = corpus
    only_negatives = valid.take(np.flatnonzero(valid.states[:, 0] == 0)).restricted(["0"])
    state = init_model(train.schema, SMALL, seed=0)
    with pytest.raises(ContractError):
        fit(state, train, only_negatives, TrainConfig(max_epochs=1))


def _one_batch(d, seed=0, size=16):
    return next(batches(d, size, epoch_seed=seed, cfg=AugmentationConfig(seed=seed)))


def test_freeze_q(partial):
    for cfg in (TrainConfig(freeze_q=True), TrainConfig(disable_adapter=True)):
        state = init_model(partial.schema, SMALL, seed=1)
        before = {n: p.values.copy() for n, p in state.named_parameters()}
        train_step(state, _one_batch(partial), cfg, make_optimizer(state, cfg))
        after = dict(state.named_parameters())
        assert after["q"].values.tobytes() == before["q"].tobytes()
        for name in ("W1", "W2", "b2", "A"):
            assert after[name].values.tobytes() != before[name].tobytes(), name


def test_q_moves_when_trainable(partial):
    state = init_model(partial.schema, SMALL, seed=1)
    cfg = TrainConfig()
    train_step(state, _one_batch(partial), cfg, make_optimizer(state, cfg))
    assert not np.array_equal(state.encoding.q.values, np.eye(10))
    assert all(np.all(p.grad == 0) for p in state.parameters())


def test_all_known_matches_bce_only(corpus):
    train, _ = corpus
    batch = _one_batch(train)
    assert batch.known.all()
    results = []
    for cfg in (TrainConfig(), TrainConfig(disable_pseudo=True, disable_consist=True)):
        state = init_model(train.schema, SMALL, seed=4)
        losses = train_step(state, batch, cfg, make_optimizer(state, cfg))
        assert losses.l_pseudo.item() == 0.0 and losses.l_consist.item() == 0.0
        results.append([p.values.tobytes() for p in state.parameters()])
    assert results[0] == results[1]


def test_non_finite_loss_aborts(partial):
    state = init_model(partial.schema, SMALL, seed=1)
    state.adapter.A.values[0, 0] = np.nan
    with pytest.raises(NumericalError, match="epoch 3, batch 7"):
        train_step(state, _one_batch(partial), TrainConfig(),
                   make_optimizer(state, TrainConfig()), epoch=3, batch_index=7)


def test_fit_is_deterministic(partial, corpus):
    _, valid = corpus
    cfg = TrainConfig(max_epochs=3, batch_size=16, seed=5)
    runs = []
    for _ in range(2):
        state = init_model(partial.schema, SMALL, seed=5)
        run = fit(state, partial, valid, cfg)
        runs.append((run.to_csv(), [p.values.tobytes() for p in state.parameters()]))
    assert runs[0] == runs[1]
    assert runs[0][0].splitlines()[0] == "epoch,l_bce,l_pseudo,l_consist,l_total,lr,valid_mauc"


def test_loss_decreases_early_on_full_labels():
    train = assemble([synthesize_digits(20, seed=31, name="train")])
    valid = assemble([synthesize_digits(5, seed=32, name="valid")])
    monotone = 0
    for seed in range(3):
        state = init_model(train.schema, seed=seed)
        run = fit(state, train, valid, TrainConfig(max_epochs=5, seed=seed))
        losses = [r.l_total for r in run.epochs]
        monotone += all(b <= a for a, b in zip(losses, losses[1:]))
    assert monotone >= 2


def test_metrics_csv_repr_floats(monkeypatch, corpus, tmp_path):
    train, valid = corpus
    monkeypatch.setattr(training, "evaluate", _Scripted([1 / 3]))
    state = init_model(train.schema, SMALL, seed=0)
    run = fit(state, train.take(range(10)), valid, TrainConfig(max_epochs=1, batch_size=10))
    run.write_csv(tmp_path / "m.csv")
    row = (tmp_path / "m.csv").read_text().splitlines()[1].split(",")
    assert row[0] == "1" and float(row[-1]) == run.epochs[0].valid_mauc
    assert math.isfinite(float(row[4])) and abs(float(row[-1]) - 1 / 3) < 1e-15
