import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from m3sr.data import HsiCube, Pair, synth_pair
from m3sr.network import ModelConfig, build_model, load_checkpoint
from m3sr.train import (TrainConfig, TrainingDiverged, TrainLog, augment, cosine_lr, mae_loss,
                        predict, train_loop, transform)

TINY = ModelConfig(base_width=4, d_state=4)


def _pairs(n=2, size=8, seed=0):
    rng = np.random.default_rng(seed)
    return [synth_pair(rng, size, size) for _ in range(n)]


# ---- loss and schedule


def test_mae_examples():
    Z = torch.rand(2, 2, 3, dtype=torch.float64)
    assert mae_loss(Z, Z) == 0
    assert mae_loss(Z, Z + 0.1).item() == pytest.approx(0.1, abs=1e-15)
    Zh = torch.rand(2, 2, 3, dtype=torch.float64)
    flat = sum(abs(a - b) for a, b in zip(Z.ravel().tolist(), Zh.ravel().tolist())) / 12
    assert mae_loss(Z, Zh).item() == pytest.approx(flat, abs=1e-15)
    with pytest.raises(ValueError):
        mae_loss(Z, Z[0])


def test_cosine_examples():
    cfg = TrainConfig(lr_min=1e-5)
    assert cosine_lr(0, 100, TrainConfig()) == 4e-4
    assert cosine_lr(100, 100, cfg) == pytest.approx(1e-5, abs=1e-18)
    assert cosine_lr(50, 100, cfg) == pytest.approx((4e-4 + 1e-5) / 2, abs=1e-18)
    with pytest.raises(ValueError):
        cosine_lr(101, 100, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr0=1e-4, lr_min=1e-3)
    with pytest.raises(ValueError):
        TrainConfig(patch=30)


# ---- augmentation


def test_identity_and_double_flip():
    x = np.random.default_rng(0).uniform(size=(3, 4, 4))
    assert np.array_equal(transform(x, 0, False), x)
    assert np.array_equal(transform(transform(x, 0, True), 0, True), x)
    assert np.array_equal(transform(x, 4, False), x)


def test_quarter_turn_index_formula():
    H = 5
    x = np.arange(2 * H * H, dtype=float).reshape(2, H, H)
    y = transform(x, 1, False)
    for i in range(H):
        for j in range(H):
            assert np.array_equal(y[:, j, H - 1 - i], x[:, i, j])
    with pytest.raises(ValueError):
        transform(np.zeros((1, 2, 4)), 1, False)


def test_augment_keeps_pair_aligned():
    rgb = np.random.default_rng(1).uniform(size=(3, 6, 6))
    hsi = np.concatenate([rgb, rgb[:1]])
    for seed in range(10):
        a, b = augment((rgb, hsi), np.random.default_rng(seed))
        assert np.array_equal(a, b[:3]) and np.array_equal(b[3], a[0])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 3), st.booleans(), st.integers(0, 2**31))
def test_augmentation_preserves_mae(k, flip, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 4, 6, 6))
    before = mae_loss(torch.from_numpy(a), torch.from_numpy(b))
    after = mae_loss(torch.from_numpy(transform(a, k, flip)), torch.from_numpy(transform(b, k, flip)))
    assert after.item() == pytest.approx(before.item(), abs=1e-15)


# ---- optimizer


def test_adam_matches_textbook_recurrence():
    cfg = TrainConfig()
    lr, (b1, b2), eps = 0.1, cfg.betas, cfg.adam_eps
    grad = lambda w: [w[0], 2.0]  # f(w) = w0^2 / 2 + 2 w1
    w = [1.0, -1.0]
    m = [0.0, 0.0]
    v = [0.0, 0.0]
    trace = []
    for t in range(1, 4):
        g = grad(w)
        for i in range(2):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            w[i] -= lr * mh / (math.sqrt(vh) + eps)
        trace.append(list(w))
    # first step moves each coordinate by lr against the gradient sign
    assert trace[0] == pytest.approx([0.9, -1.1], abs=1e-8)

    p = torch.tensor([1.0, -1.0], dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([p], lr=lr, betas=cfg.betas, eps=eps)
    for t in range(3):
        opt.zero_grad()
        (p[0] ** 2 / 2 + 2 * p[1]).backward()
        opt.step()
        assert p.detach().tolist() == pytest.approx(trace[t], abs=1e-14)


def test_first_step_descent_on_most_seeds():
    pair = _pairs(1, 8)[0]
    x = torch.from_numpy(pair.rgb).unsqueeze(0)
    z = torch.from_numpy(np.ascontiguousarray(pair.hsi.chw())).unsqueeze(0)
    wins = 0
    for seed in range(100):
        m = build_model(ModelConfig(base_width=4, d_state=4, seed=seed))
        opt = torch.optim.Adam(m.parameters(), lr=1e-5)
        loss0 = mae_loss(z, m(x))
        loss0.backward()
        opt.step()
        with torch.no_grad():
            wins += mae_loss(z, m(x)).item() < loss0.item()
    assert wins >= 95


# ---- loop


def test_loop_steps_lr_trace_and_log(tmp_path):
    pairs = _pairs(3, 8)
    cfg = TrainConfig(batch_size=2, epochs=3, patch=8)
    res = train_loop(build_model(TINY), pairs, cfg, log_path=tmp_path / "log")
    assert len(res.log.steps) == 3 * 2
    total = len(res.log.steps)
    assert res.log.lrs == [cosine_lr(s, total, cfg) for s in range(total)]
    lines = (tmp_path / "log").read_text().splitlines()
    step, loss, lr = lines[1].split()
    assert int(step) == 1 and float(loss) == res.log.losses[1] and float(lr) == res.log.lrs[1]


def test_loop_deterministic_and_checkpointed(tmp_path):
    pairs = _pairs(2, 8)
    cfg = TrainConfig(batch_size=1, epochs=2, patch=8, seed=4)
    a = train_loop(build_model(TINY), pairs, cfg, checkpoint_path=tmp_path / "a.ckpt")
    b = train_loop(build_model(TINY), pairs, cfg, checkpoint_path=tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert a.log.losses == b.log.losses
    m = load_checkpoint(tmp_path / "a.ckpt")
    for k, v in a.model.state_dict().items():
        assert torch.equal(m.state_dict()[k], v)


def test_validation_keeps_best(tmp_path):
    pairs = _pairs(2, 12)
    val = _pairs(1, 12, seed=5)
    cfg = TrainConfig(batch_size=2, epochs=3, patch=12)
    res = train_loop(build_model(TINY), pairs, cfg, val=val, log_path=tmp_path / "log")
    psnrs = [r.psnr_db for _, r in res.log.validation]
    assert len(psnrs) == 3 and res.best_psnr == max(psnrs)
    assert sum(line.startswith("# val") for line in (tmp_path / "log").read_text().splitlines()) == 3


def test_non_finite_loss_aborts():
    p = _pairs(1, 8)[0]
    bad = Pair(p.rgb, HsiCube(np.full(p.hsi.shape, np.nan, dtype=np.float32)))
    with pytest.raises(TrainingDiverged, match="step 0"):
        train_loop(build_model(TINY), [bad], TrainConfig(patch=8, epochs=1))
    with pytest.raises(ValueError):
        train_loop(build_model(TINY), [], TrainConfig(patch=8))


def test_predict_layout_and_range():
    p = _pairs(1, 8)[0]
    out = predict(build_model(TINY), p.rgb)
    assert out.shape == (8, 8, 31) and out.min() >= 0 and out.max() <= 1


def test_log_serialization():
    log = TrainLog(steps=[(0, 0.5, 4e-4), (1, 0.25, 2e-4)])
    assert log.dumps() == "0 0.5 0.0004\n1 0.25 0.0002\n"


@pytest.mark.slow
def test_overfit_four_pairs_500_steps():
    # C0 = 16, N = 8 on 16x16 pairs, full batch, no augmentation, default lr schedule
    rng = np.random.default_rng(0)
    pairs = [synth_pair(rng, 16, 16) for _ in range(4)]
    model = build_model(ModelConfig(base_width=16, d_state=8))
    res = train_loop(model, pairs, TrainConfig(batch_size=4, epochs=500, patch=16, augment=False))
    assert len(res.log.losses) == 500
    assert res.log.losses[-1] < 0.01
