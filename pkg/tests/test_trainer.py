import json

import numpy as np
import pytest
import torch

from dualqa.model import ModelConfig, ModelInput, build_model
from dualqa.trainer import (
    TrainConfig,
    batch_indices,
    grad_check,
    lr_at,
    predict_index_spans,
    pretrain_masked_units,
    train,
)


def toy_inputs(cfg, n, seed=0, plen=12):
    """Question is one unit; the answer is the pair starting where it occurs in the passage."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        q = int(rng.integers(cfg.n_units))
        p = rng.choice([u for u in range(cfg.n_units) if u != q], size=plen)
        at = int(rng.integers(plen - 1))
        p[at] = q
        tok = np.r_[cfg.bos, q, cfg.sep, p, cfg.eos]
        glob = np.zeros(tok.size, bool)
        glob[:2] = True
        pm = np.zeros(tok.size, bool)
        pm[3:-1] = True
        out.append(ModelInput(tok, pm, glob, (3 + at, 4 + at), passage_offset=3, example_id=f"t{i}"))
    return out


def small_cfg(dropout=0.0):
    return ModelConfig(n_units=10, max_len=32, layers=2, model_dim=32, heads=2, ffn_dim=64, local_window=4, dropout=dropout)


def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.0
    assert lr_at(500, cfg) == pytest.approx(1e-4)
    assert lr_at(2750, cfg) == pytest.approx(5e-5)
    assert lr_at(5000, cfg) == 0.0
    with pytest.raises(ValueError):
        lr_at(5001, cfg)


def test_lr_is_piecewise_linear():
    cfg = TrainConfig(peak_lr=2.0, warmup_steps=10, total_steps=30)
    vals = [lr_at(s, cfg) for s in range(31)]
    assert max(vals) == vals[10] == 2.0
    assert np.allclose(np.diff(vals[:11]), 0.2)
    assert np.allclose(np.diff(vals[10:]), -0.1)


def test_batches_cover_each_epoch_once():
    n, bs = 10, 4
    seen = np.concatenate([batch_indices(s, n, bs, seed=3) for s in range(5)])
    assert sorted(seen[:10]) == list(range(10))
    assert sorted(seen[10:20]) == list(range(10))
    np.testing.assert_array_equal(batch_indices(2, n, bs, 3), batch_indices(2, n, bs, 3))
    assert not np.array_equal(batch_indices(0, n, bs, 3), batch_indices(0, n, bs, 4))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=10, total_steps=10)
    with pytest.raises(ValueError):
        TrainConfig(peak_lr=0)


def test_overfits_small_set():
    mc = small_cfg()
    data = toy_inputs(mc, 32)
    model = build_model(mc, seed=0)
    cfg = TrainConfig(peak_lr=3e-3, warmup_steps=50, total_steps=500, batch_size=16, seed=0)
    res = train(data, model, cfg)
    losses = [r["loss"] for r in res.log]
    assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])
    pred = predict_index_spans(res.model, data)
    exact = np.mean([(p.start_idx + 3, p.end_idx + 3) == tuple(d.target) for p, d in zip(pred, data)])
    assert exact >= 0.95


def _short_run(tmp_path, name, **kw):
    mc = small_cfg(dropout=0.1)
    data = toy_inputs(mc, 20, seed=1)
    cfg = TrainConfig(peak_lr=1e-3, warmup_steps=3, total_steps=12, batch_size=4, seed=5)
    model = build_model(mc, seed=2)
    return train(data, model, cfg, log_path=tmp_path / f"{name}.jsonl", **kw), data


def test_training_is_deterministic(tmp_path):
    a, _ = _short_run(tmp_path, "a")
    b, _ = _short_run(tmp_path, "b")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for (k, x), (_, y) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(x, y), k


def test_resume_matches_uninterrupted_run(tmp_path):
    full, _ = _short_run(tmp_path, "full")
    part, _ = _short_run(tmp_path, "part", checkpoint_path=tmp_path / "ck", stop_after=5)
    assert part.steps_done == 5
    rest, _ = _short_run(tmp_path, "part", resume_from=tmp_path / "ck")
    for (k, x), (_, y) in zip(full.model.state_dict().items(), rest.model.state_dict().items()):
        assert torch.equal(x, y), k
    log = [json.loads(line) for line in (tmp_path / "part.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == list(range(1, 13))
    assert (tmp_path / "part.jsonl").read_bytes() == (tmp_path / "full.jsonl").read_bytes()


def test_rejects_empty_dataset():
    mc = small_cfg()
    with pytest.raises(ValueError):
        train([], build_model(mc), TrainConfig(total_steps=5, warmup_steps=1))


def test_pretraining_reduces_loss():
    mc = small_cfg()
    data = [ModelInput(d.tokens, d.passage_mask, d.global_mask) for d in toy_inputs(mc, 64, seed=3)]
    cfg = TrainConfig(peak_lr=3e-3, warmup_steps=10, total_steps=120, batch_size=16)
    res = pretrain_masked_units(build_model(mc, seed=0), data, cfg)
    losses = [r["loss"] for r in res.log]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_grad_check_and_epsilon_sweep():
    mc = ModelConfig(n_units=10, max_len=32, layers=2, model_dim=16, heads=2, ffn_dim=32, local_window=4, dropout=0.1)
    model = build_model(mc, seed=0)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=torch.Generator().manual_seed(p.numel())) * 0.1)
    ex = toy_inputs(mc, 1, seed=9)[0]
    assert grad_check(model, ex, n_coords=1000) < 1e-4

    _, det = grad_check(model, ex, n_coords=300, return_details=True)
    a = det["analytic"]
    big = np.abs(a) > 1e-3 * np.abs(a).max()
    errs = []
    for eps in (1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7):
        _, d = grad_check(model, ex, epsilon=eps, n_coords=300, return_details=True)
        errs.append(np.median(d["rel"][big]))
    best = int(np.argmin(errs))
    assert 0 < best < len(errs) - 1
