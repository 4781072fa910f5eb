import json

import numpy as np
import pytest

from swbt import envsim
from swbt import finetune as ft
from swbt import numcore as nc
from swbt import pretrain as pt
from swbt import scoring
from swbt.datamodel import DemoDataset, segment_dataset
from swbt.transformer import SegmentTransformer

from conftest import rand_batch, small_cfg


def _bc_err(model, batch):
    a = model.predict_action(batch)
    return ((a - batch.action[:, -1]) ** 2).sum(axis=-1)


def test_lambda_zero_is_expert_term():
    m = SegmentTransformer(small_cfg(), seed=1)
    be, bf = rand_batch(4, 4, 1), rand_batch(3, 4, 2)
    a = ft.loss_weighted_bc(m, be, bf, [0.5, 0.7, 1.0], lam=0.0).item()
    b = ft.loss_weighted_bc(m, be, None).item()
    assert a == b == pytest.approx(_bc_err(m, be).mean(), rel=1e-12)


def test_zero_q_contributes_nothing():
    m = SegmentTransformer(small_cfg(), seed=2)
    be, bf = rand_batch(2, 4, 3), rand_batch(1, 4, 4)
    got = ft.loss_weighted_bc(m, be, bf, [0.0], lam=0.1).item()
    assert got == pytest.approx(_bc_err(m, be).mean(), rel=1e-12)


def test_hand_computed_two_plus_one():
    m = SegmentTransformer(small_cfg(), seed=3)
    be, bf = rand_batch(2, 4, 5), rand_batch(1, 4, 6)
    got = ft.loss_weighted_bc(m, be, bf, [0.5], lam=0.1).item()
    want = _bc_err(m, be).mean() + 0.05 * _bc_err(m, bf)[0]
    assert got == pytest.approx(want, rel=1e-12)


def test_q_ratio_is_exact():
    m = SegmentTransformer(small_cfg(), seed=4)
    be, seg = rand_batch(2, 4, 7), rand_batch(1, 4, 8)
    base = ft.loss_weighted_bc(m, be, None).item()
    t1 = ft.loss_weighted_bc(m, be, seg, [0.3], lam=1.0).item() - base
    t2 = ft.loss_weighted_bc(m, be, seg, [0.9], lam=1.0).item() - base
    assert t2 / t1 == pytest.approx(3.0, rel=1e-9)


def test_final_action_is_target_not_input():
    m = SegmentTransformer(small_cfg(), seed=5)
    be = rand_batch(3, 4, 9)
    pred = m.predict_action(be)
    be.action = be.action.copy()
    be.action[:, -1] = 0.0
    np.testing.assert_array_equal(m.predict_action(be), pred)
    assert ft.loss_weighted_bc(m, be, None).item() == pytest.approx((pred ** 2).sum(-1).mean(), rel=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        ft.FinetuneConfig(lam=-0.1)
    with pytest.raises(ValueError):
        ft.FinetuneConfig(beta=1.5)
    with pytest.raises(ValueError):
        ft.FinetuneConfig(init="warm")


def test_baseline_configs():
    cfg = ft.FinetuneConfig(model=small_cfg(seg_len=6))
    assert ft.baseline_config("swbt", cfg).init == "pretrained"
    b = ft.baseline_config("swbt-base", cfg)
    assert (b.init, b.lam) == ("pretrained", 0.0)
    t = ft.baseline_config("tf-bc", cfg)
    assert (t.init, t.lam, t.model.seg_len) == ("random", 0.0, 6)
    assert ft.baseline_config("bc", cfg).model.seg_len == 1
    with pytest.raises(ValueError):
        ft.baseline_config("gail", cfg)


# -- training ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def data():
    d_e = DemoDataset(envsim.run_episodes(envsim.scripted_policy("expert"), range(6), tag="expert"), "expert")
    d_i = DemoDataset(envsim.run_episodes(envsim.scripted_policy("level-0.45"), range(100, 110), tag="l"),
                      "imperfect")
    return d_e, d_i


def _fcfg(**kw):
    base = dict(batch_size=8, steps=4, lr=1e-3, seed=2, eval_every=2, eval_episodes=4, last_k=2,
                init="random", model=small_cfg())
    base.update(kw)
    return ft.FinetuneConfig(**base)


def _snapshots():
    snaps = []
    return snaps, lambda m: snaps.append([p.data.copy() for p in m.parameters()])


def test_lambda_zero_matches_expert_bc_trajectory(data):
    d_e, d_i = data
    filtered = segment_dataset(d_i, 4)
    q = np.linspace(0.5, 1.0, len(filtered))
    s1, tr1 = _snapshots()
    s2, tr2 = _snapshots()
    ft.finetune(d_e, filtered, q, _fcfg(lam=0.0, eval_every=0), trace=tr1)
    ft.finetune(d_e, None, None, _fcfg(lam=0.0, eval_every=0), trace=tr2)
    # independent reference: a plain Adam loop on the expert term
    cfg = _fcfg()
    ref = SegmentTransformer(cfg.model, seed=cfg.seed)
    segs = segment_dataset(d_e, 4)
    opt = nc.Adam(ref.parameters(), lr=cfg.lr, clip=cfg.clip)
    for step in range(1, cfg.steps + 1):
        rng = np.random.default_rng([cfg.seed, step, 0])
        batch = segs.take(rng.integers(len(segs), size=cfg.batch_size))
        a_hat = ref.action_tensor(batch)
        diff = a_hat - batch.action[:, -1]
        opt.zero_grad()
        (diff * diff).sum(axis=-1).mean().backward()
        opt.step()
        for a, b, c in zip(s1[step - 1], s2[step - 1], ref.parameters()):
            np.testing.assert_array_equal(a, b)
            np.testing.assert_array_equal(a, c.data)


def test_filtered_data_changes_training(data):
    d_e, d_i = data
    filtered = segment_dataset(d_i, 4)
    q = np.ones(len(filtered))
    a = ft.finetune(d_e, filtered, q, _fcfg(lam=1.0, eval_every=0)).model
    b = ft.finetune(d_e, None, None, _fcfg(lam=1.0, eval_every=0)).model
    assert not np.array_equal(a.parameters()[0].data, b.parameters()[0].data)


def test_deterministic_eval_log(data):
    d_e, _ = data
    r1, r2 = ft.finetune(d_e, None, None, _fcfg()), ft.finetune(d_e, None, None, _fcfg())
    assert r1.eval_csv() == r2.eval_csv()
    assert [r[0] for r in r1.eval_log] == [2, 4]
    assert r1.final_metric == pytest.approx(np.mean([r[1] for r in r1.eval_log]))
    assert r1.eval_csv().splitlines()[0] == "step,success_rate,loss"


def test_eval_at_final_step_when_not_multiple(data):
    r = ft.finetune(data[0], None, None, _fcfg(steps=5, eval_every=2, last_k=5))
    assert [s for s, _, _ in r.eval_log] == [2, 4, 5]


def test_empty_expert_data():
    with pytest.raises(pt.EmptyDatasetError):
        ft.finetune(DemoDataset([], "expert"), None, None, _fcfg())


def test_pretrained_init_requires_model(data):
    with pytest.raises(ft.MissingArtifactError):
        ft.finetune(data[0], None, None, _fcfg(init="pretrained"))


def test_pretrained_init_copies_weights(data):
    src = SegmentTransformer(small_cfg(), seed=9)
    m = ft.init_model(_fcfg(init="pretrained"), src)
    for a, b in zip(m.parameters(), src.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
        assert a is not b


def test_segment_length_mismatch(data):
    with pytest.raises(nc.ShapeError):
        ft.finetune(data[0], rand_batch(3, 5), [1.0] * 3, _fcfg(lam=0.1))


# -- pipeline ---------------------------------------------------------------------------


def _pcfg():
    return pt.PretrainConfig(batch_size=8, steps=3, lr=1e-3, seed=2, model=small_cfg())


def test_run_swbt_artifacts(tmp_path, data):
    d_e, d_i = data
    art = ft.run_swbt(d_e, d_i, _pcfg(), scoring.SimilarityConfig(), _fcfg(init="pretrained", beta=0.5), tmp_path)
    for name in ("pretrain.ckpt", "pretrain_loss.csv", "quality.csv", "quality_hist.csv", "quality_hist.txt",
                 "finetune.ckpt", "eval_log.csv", "report.json"):
        assert (tmp_path / name).exists(), name
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["n_filtered"] == art.table.n_kept(0.5) == art.result.n_filtered
    assert art.table.beta == 0.5
    assert set(rep["dataset_hashes"]) == {"expert", "imperfect"}
    assert ft.load_checkpoint(tmp_path / "finetune.ckpt").cfg == small_cfg()


def test_run_swbt_empty_imperfect(tmp_path, data):
    art = ft.run_swbt(data[0], DemoDataset([], "imperfect"), _pcfg(), scoring.SimilarityConfig(),
                      _fcfg(init="pretrained"), tmp_path)
    assert art.table is None and art.result.n_filtered == 0
    assert not (tmp_path / "quality.csv").exists()


def test_run_swbt_beta_one_filters_everything(data):
    art = ft.run_swbt(data[0], data[1], _pcfg(), scoring.SimilarityConfig(), _fcfg(init="pretrained", beta=1.0))
    assert art.result.n_filtered == 0 and art.table is not None


def test_stage_errors_name_the_stage(data):
    with pytest.raises(ft.StageError) as exc:
        ft.run_swbt(DemoDataset([], "expert"), DemoDataset([], "imperfect"), _pcfg(), scoring.SimilarityConfig(),
                    _fcfg(init="pretrained"))
    assert exc.value.stage == "pretrain" and str(exc.value).startswith("[pretrain]")
    with pytest.raises(ft.StageError) as exc:
        ft.run_swbt(DemoDataset([], "expert"), DemoDataset([], "imperfect"), _pcfg(), scoring.SimilarityConfig(),
                    _fcfg())
    assert exc.value.stage == "finetune"


def test_missing_checkpoint():
    with pytest.raises(ft.MissingArtifactError):
        ft.load_checkpoint("/nonexistent/x.ckpt")


def test_config_hash_stable():
    assert ft.config_hash(_fcfg()) == ft.config_hash(_fcfg())
    assert ft.config_hash(_fcfg()) != ft.config_hash(_fcfg(lam=0.2))
