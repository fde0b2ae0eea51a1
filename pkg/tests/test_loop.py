import numpy as np
import pytest

from aspest import loop
from aspest import metrics as M
from aspest.acquisition import ACQUISITIONS
from aspest.ensemble import CheckpointEnsemble
from aspest.exceptions import ConfigurationError, ProtocolError
from aspest.loop import (
    AspestConfig,
    Oracle,
    build_pseudo_label_set,
    run_aspest,
    run_de,
    run_sr,
    self_train_round,
)
from aspest.nn import TrainConfig

SMALL = AspestConfig(n_source_steps=20, n_members=2, n_rounds=2, ckpt_steps=10,
                     ckpt_epochs=1, self_train_epochs=2)


def test_oracle_protocol():
    o = Oracle([3, 1, 2, 0], budget=3)
    assert o.label([2, 0]).tolist() == [2, 3]
    assert o.consumed == 2
    with pytest.raises(ProtocolError):
        o.label([0])
    with pytest.raises(ProtocolError):
        o.label([1, 3])
    with pytest.raises(ProtocolError):
        o.label([4])
    with pytest.raises(ProtocolError):
        o.label([1, 1])
    assert o.label([]).size == 0


def test_aspest_config_validation():
    cfg = AspestConfig()
    assert (cfg.lam, cfg.n_source_steps, cfg.n_members, cfg.n_rounds, cfg.ckpt_steps,
            cfg.ckpt_epochs, cfg.pseudo_fraction, cfg.threshold, cfg.self_train_epochs) == \
        (1.0, 1000, 5, 10, 200, 5, 0.1, 0.9, 20)
    for bad in ({"threshold": 1.0}, {"pseudo_fraction": 0}, {"n_members": 0}, {"lam": -1}):
        with pytest.raises(ConfigurationError):
            AspestConfig(**bad)


def test_pseudo_label_set_membership():
    state = CheckpointEnsemble(4, 2)
    state.update(np.array([[1.0, 0.0], [0.95, 0.05], [0.9, 0.1], [0.6, 0.4]]))
    idx, soft = build_pseudo_label_set(state, 0.9)
    assert idx.tolist() == [1, 2]
    np.testing.assert_array_equal(soft, state.P[[1, 2]])
    with pytest.raises(ConfigurationError):
        build_pseudo_label_set(CheckpointEnsemble(2, 2), 0.9)


def test_self_train_empty_set_warns(tiny_source, tiny_data, fast_cfg):
    tr, _, te = tiny_data
    state = CheckpointEnsemble(len(te), tr.n_classes)
    with pytest.warns(RuntimeWarning):
        added = self_train_round([tiny_source.copy()], state, te.X, np.zeros(0, dtype=int),
                                 np.zeros((0, tr.n_classes)), tr.X, tr.y, 1.0, 2, 1, fast_cfg)
    assert added == 0


def _check_protocol(result, budget, n_rounds, y):
    batches = result.selection.batches
    flat = np.concatenate(batches) if batches else np.zeros(0, dtype=int)
    assert len(set(flat.tolist())) == flat.size
    assert flat.size <= budget
    if budget:
        assert len(batches) == n_rounds and all(len(b) == budget // n_rounds for b in batches)
    frame = result.frame(y)
    assert np.array_equal(frame.selected, result.selected_mask)
    keep = ~result.selected_mask
    plain = M.EvalFrame(result.confidence[keep], result.predictions[keep] == y[keep], None)
    assert M.auacc(frame) == pytest.approx(M.auacc(plain), abs=1e-12)


@pytest.mark.parametrize("acq", ACQUISITIONS)
def test_de_every_acquisition_respects_protocol(acq, tiny_source, tiny_data, fast_cfg):
    tr, _, te = tiny_data
    oracle = Oracle(te.y, 20)
    r = run_de(tiny_source, tr.X, tr.y, te.X, oracle, acq, 20, 2, n_members=2,
               n_source_steps=10, train_cfg=fast_cfg, seed=1)
    _check_protocol(r, 20, 2, te.y)
    assert oracle.consumed == 20 and len(r.rounds) == 2


def test_sr_single_member_and_zero_budget(tiny_source, tiny_data, fast_cfg):
    tr, _, te = tiny_data
    r = run_sr(tiny_source, tr.X, tr.y, te.X, Oracle(te.y, 0), "margin", 0, 10, fast_cfg)
    assert len(r.models) == 1 and r.rounds == []
    from aspest.nn import mlp_forward
    np.testing.assert_array_equal(r.probs, mlp_forward(tiny_source, te.X)[0])


def test_budget_smaller_than_rounds_rejected(tiny_source, tiny_data):
    tr, _, te = tiny_data
    with pytest.raises(ConfigurationError):
        run_de(tiny_source, tr.X, tr.y, te.X, Oracle(te.y, 5), "margin", 5, 10)
    with pytest.raises(ConfigurationError):
        run_aspest(tiny_source, tr.X, tr.y, te.X, Oracle(te.y, 5), AspestConfig(), 5)


def test_aspest_protocol_and_pseudo_labels(tiny_source, tiny_data, fast_cfg, monkeypatch):
    tr, _, te = tiny_data
    seen = []
    real = loop.build_pseudo_label_set

    def spy(state, threshold):
        idx, soft = real(state, threshold)
        seen.append((state.P.copy(), idx, threshold))
        return idx, soft

    monkeypatch.setattr(loop, "build_pseudo_label_set", spy)
    r = run_aspest(tiny_source, tr.X, tr.y, te.X, Oracle(te.y, 20), SMALL, 20, fast_cfg, seed=2)
    _check_protocol(r, 20, 2, te.y)
    assert len(seen) == 2
    for P, idx, eta in seen:
        conf = P.max(axis=1)
        expected = np.flatnonzero((conf >= eta) & (conf < 1.0))
        assert np.array_equal(idx, expected)
    for log in r.rounds:
        assert log.n_self_train <= int(SMALL.pseudo_fraction * len(te))
        assert np.all((log.pseudo_confidence >= SMALL.threshold) & (log.pseudo_confidence < 1))


def test_aspest_zero_budget_returns_phase0_ensemble(tiny_source, tiny_data, fast_cfg):
    tr, _, te = tiny_data
    r = run_aspest(tiny_source, tr.X, tr.y, te.X, Oracle(te.y, 0), SMALL, 0, fast_cfg)
    assert r.rounds == [] and r.checkpoint_state.n_checkpoints == 2 * 2
    np.testing.assert_allclose(r.probs.sum(axis=1), 1.0)


def test_aspest_checkpoint_count_with_default_protocol(tiny_source, tiny_data):
    tr, _, te = tiny_data
    cfg = AspestConfig(n_rounds=1, n_source_steps=200)
    tcfg = TrainConfig(learning_rate=0.01, momentum=0.9)
    r = run_aspest(tiny_source, tr.X, tr.y, te.X, Oracle(te.y, 10), cfg, 10, tcfg, seed=0)
    log = r.rounds[0]
    assert log.n_self_train > 0
    # fine-tuning runs >= 50 epochs (>= 10 checkpoints), self-training 20 epochs (4)
    assert log.n_checkpoints >= cfg.n_members * (10 + 4)


def test_runs_are_deterministic_and_thread_invariant(tiny_source, tiny_data, fast_cfg):
    tr, _, te = tiny_data
    a = run_aspest(tiny_source, tr.X, tr.y, te.X, Oracle(te.y, 20), SMALL, 20, fast_cfg, seed=5)
    b = run_aspest(tiny_source, tr.X, tr.y, te.X, Oracle(te.y, 20), SMALL, 20, fast_cfg, seed=5)
    c = run_aspest(tiny_source, tr.X, tr.y, te.X, Oracle(te.y, 20), SMALL, 20, fast_cfg, seed=5,
                   threads=2)
    assert np.array_equal(a.probs, b.probs)
    assert np.array_equal(a.probs, c.probs)
    assert np.array_equal(a.selection.selected, c.selection.selected)
    d = run_aspest(tiny_source, tr.X, tr.y, te.X, Oracle(te.y, 20), SMALL, 20, fast_cfg, seed=6)
    assert not np.array_equal(a.selection.selected, d.selection.selected)


def test_source_model_untouched(tiny_source, tiny_data, fast_cfg):
    tr, _, te = tiny_data
    before = [p.copy() for p in tiny_source.params()]
    run_de(tiny_source, tr.X, tr.y, te.X, Oracle(te.y, 20), "margin", 20, 2, 2, 5, fast_cfg)
    assert all(np.array_equal(a, b) for a, b in zip(before, tiny_source.params()))


def test_round_log_json(tiny_source, tiny_data, fast_cfg):
    tr, _, te = tiny_data
    r = run_aspest(tiny_source, tr.X, tr.y, te.X, Oracle(te.y, 20), SMALL, 20, fast_cfg)
    j = r.rounds[0].to_json()
    assert {"round", "selected_indices", "ensemble_accuracy", "metrics", "n_checkpoints",
            "n_pseudo_labeled", "n_self_train"} <= set(j)
    assert j["round"] == 1 and len(j["selected_indices"]) == 10
