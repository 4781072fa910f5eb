import numpy as np
import pytest

from swbt import numcore as nc
from swbt import pretrain as pt
from swbt.datamodel import DemoDataset, segment_dataset
from swbt.transformer import SLOT_A, SLOT_M, SegmentTransformer, TokenMaskSpec

from conftest import rand_batch, small_cfg


def test_config_validation():
    with pytest.raises(ValueError):
        pt.PretrainConfig(mask_probs=(0.0, 0.5))
    with pytest.raises(ValueError):
        pt.PretrainConfig(mask_probs=(1.0,))
    with pytest.raises(ValueError):
        pt.PretrainConfig(w_aa=-1.0)


def test_sample_mask_forced_rates():
    rng = np.random.default_rng(0)
    assert not pt.sample_mask(6, rng, p=0.0).masked.any()
    assert pt.sample_mask(6, rng, p=1.0).masked.all()
    spec = pt.sample_mask(6, rng, p=1.0, pad=[True, True, False, False, False, False])
    assert not spec.masked[:2].any() and spec.masked[2:].all()
    assert spec.mode == "bidirectional"


def test_mask_fraction():
    rng = np.random.default_rng(1)
    frac = np.mean([pt.sample_mask(6, rng, p=0.4).masked.mean() for _ in range(10_000)])
    assert abs(frac - 0.4) <= 0.02


def test_mask_rate_drawn_from_choices():
    rng = np.random.default_rng(2)
    fracs = [pt.sample_mask(200, rng, probs=(0.1, 0.9)).masked.mean() for _ in range(50)]
    assert all(abs(f - 0.1) < 0.06 or abs(f - 0.9) < 0.06 for f in fracs)
    assert min(fracs) < 0.5 < max(fracs)


def test_batch_masks_skip_padding():
    pad = np.zeros((50, 6), dtype=bool)
    pad[:, :3] = True
    m = pt.sample_masks(pad, np.random.default_rng(0), (0.9,))
    assert not m[:, :3].any() and m[:, 3:].any()


def test_partition_exact():
    rng = np.random.default_rng(3)
    for _ in range(200):
        pad = np.arange(6)[None] < rng.integers(0, 6, size=(4, 1))
        masked = pt.sample_masks(pad, rng, (0.4, 0.3, 0.2, 0.1))
        a, b = pt.slot_partition(masked, pad)
        assert not (a & b).any()
        np.testing.assert_array_equal(a | b, np.broadcast_to(~pad[..., None], a.shape))


def _model(l=4, seed=0):
    return SegmentTransformer(small_cfg(seg_len=l), seed=seed)


def test_empty_mask_mtp_zero_full_mask_tr_zero():
    m, b = _model(), rand_batch(3, 4)
    assert pt.loss_mtp(m, b, np.zeros((4, 3), bool)).item() == 0.0
    assert pt.loss_tr(m, b, np.ones((4, 3), bool)).item() == 0.0
    assert pt.loss_mtp(m, b, np.ones((4, 3), bool)).item() > 0.0


def test_single_masked_slot_oracle():
    m, b = _model(seed=4), rand_batch(1, 4, 5)
    masked = np.zeros((4, 3), bool)
    masked[2, SLOT_M] = True
    got = pt.loss_mtp(m, b, masked).item()
    _, m_hat, _ = m.decode_heads(m.encode(b, TokenMaskSpec(masked)))
    want = np.mean((m_hat[0, 2] - b.proprio[0, 2]) ** 2)
    assert got == pytest.approx(want, rel=1e-12)


def test_unnormalised_sums_equal_total_error():
    m, b = _model(seed=5), rand_batch(3, 4, 6, n_pad=[0, 1, 2])
    masked = pt.sample_masks(b.pad, np.random.default_rng(0), (0.5,))
    err = pt.slot_errors(m, b, masked).data
    sup_mtp, sup_tr = pt.slot_partition(masked, b.pad)
    l_mtp, l_tr = pt.combine_slot_losses(nc.Tensor(err), masked, b.pad)
    total = 0.0
    # independent pass: one segment at a time, every real slot summed by hand
    for i in range(3):
        z = m.encode(b.take([i]), TokenMaskSpec(masked[i]))
        o, mm, a = m.decode_heads(z)
        for t in range(4):
            if b.pad[i, t]:
                continue
            total += np.mean((o[0, t] - b.obs[i, t]) ** 2) + np.mean((mm[0, t] - b.proprio[i, t]) ** 2) \
                + np.mean((a[0, t] - b.action[i, t]) ** 2)
    assert l_mtp.item() * sup_mtp.sum() + l_tr.item() * sup_tr.sum() == pytest.approx(total, rel=1e-10)


def test_gradient_routing_by_partition():
    rng = np.random.default_rng(7)
    pad = np.array([[True, False, False, False]])
    masked = rng.random((1, 4, 3)) < 0.5
    for which in (0, 1):
        err = nc.Tensor(rng.random((1, 4, 3)), requires_grad=True)
        pt.combine_slot_losses(err, masked, pad)[which].backward()
        sup = pt.slot_partition(masked, pad)[which]
        np.testing.assert_array_equal(err.grad != 0, sup)


def test_aa_prediction_ignores_own_action():
    m, b = _model(seed=8), rand_batch(2, 4, 9)
    z1 = m.encode(b, TokenMaskSpec.causal(4)).z
    b.action = b.action.copy()
    b.action[:, 2] = -b.action[:, 2]
    z2 = m.encode(b, TokenMaskSpec.causal(4)).z
    np.testing.assert_array_equal(z1[:, 2, SLOT_A], z2[:, 2, SLOT_A])


def test_aa_single_step_toy():
    m, b = _model(l=1, seed=9), rand_batch(3, 1, 10)
    got = pt.loss_aa(m, b).item()
    a_hat = m.predict_action(b)
    assert got == pytest.approx(np.mean((a_hat - b.action[:, 0]) ** 2), rel=1e-12)
    b.action = -b.action
    np.testing.assert_array_equal(m.predict_action(b), a_hat)


def test_aa_excludes_padding():
    m, b = _model(seed=10), rand_batch(1, 4, 11, n_pad=2)
    errs = pt.causal_action_errors(m, b).data
    assert pt.loss_aa(m, b).item() == pytest.approx(errs[0, 2:].mean(), rel=1e-12)


def test_aa_zero_for_perfect_predictor():
    m, b = _model(seed=11), rand_batch(2, 4, 12)
    b.action = m.encode(b, TokenMaskSpec.causal(4)).z[..., SLOT_A, :3] * 0.0
    for p in m.head_a.parameters():
        p.data[:] = 0.0
    assert pt.loss_aa(m, b).item() == 0.0


def _toy_data(n=6):
    from swbt import envsim
    trajs = envsim.run_episodes(envsim.scripted_policy("expert"), range(n), tag="expert")
    return DemoDataset(trajs, "expert")


def _tcfg(**kw):
    base = dict(batch_size=8, steps=5, lr=1e-3, seed=3, model=small_cfg(seg_len=4))
    base.update(kw)
    return pt.PretrainConfig(**base)


def test_empty_dataset():
    with pytest.raises(pt.EmptyDatasetError):
        pt.pretrain(DemoDataset([], "union"), _tcfg())


def test_deterministic():
    d = _toy_data()
    r1, r2 = pt.pretrain(d, _tcfg()), pt.pretrain(d, _tcfg())
    assert r1.log_csv() == r2.log_csv()
    for (k, a), (_, b) in zip(r1.model.state_dict().items(), r2.model.state_dict().items()):
        np.testing.assert_array_equal(a, b, err_msg=k)


def test_aa_only_weights_match_aa_training():
    d = _toy_data()
    cfg = _tcfg(w_mtp=0.0, w_tr=0.0)
    got = pt.pretrain(d, cfg).model
    ref = SegmentTransformer(cfg.model, seed=cfg.seed)
    segs = segment_dataset(d, 4)
    opt = nc.Adam(ref.parameters(), lr=cfg.lr, clip=cfg.clip)
    for step in range(1, cfg.steps + 1):
        batch_rng = pt.step_rngs(cfg.seed, step)[0]
        batch = segs.take(batch_rng.integers(len(segs), size=cfg.batch_size))
        opt.zero_grad()
        pt.loss_aa(ref, batch).backward()
        opt.step()
    for (k, a), (_, b) in zip(got.state_dict().items(), ref.state_dict().items()):
        np.testing.assert_array_equal(a, b, err_msg=k)


def test_loss_log_columns():
    res = pt.pretrain(_toy_data(3), _tcfg(steps=3))
    lines = res.log_csv().splitlines()
    assert lines[0] == "step,loss_mtp,loss_tr,loss_aa,loss_total"
    assert len(lines) == 4
    step, mtp, tr, aa, total = res.log[0]
    assert total == pytest.approx(mtp + tr + aa, rel=1e-6)


def test_labels_not_read():
    d = _toy_data(4)
    flipped = DemoDataset([type(t)(t.obs, t.proprio, t.action, not t.success, "other", t.episode_seed) for t in d],
                          "union")
    a = pt.pretrain(DemoDataset(list(d), "union"), _tcfg(steps=2))
    b = pt.pretrain(flipped, _tcfg(steps=2))
    assert a.log_csv() == b.log_csv()


@pytest.mark.slow
def test_loss_halves_on_expert_data():
    from swbt.transformer import ModelConfig
    d = _toy_data(50)
    cfg = pt.PretrainConfig(steps=2000, batch_size=64, lr=1e-3, seed=0, model=ModelConfig(precision="f32"))
    total = np.array([r[-1] for r in pt.pretrain(d, cfg).log])
    assert total[-100:].mean() <= 0.5 * total[:100].mean()
