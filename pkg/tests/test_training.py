import numpy as np
import pytest

from lowbit_emotion import models, nn, training
from lowbit_emotion.data import Pairs, concat_pairs, make_pairs
from lowbit_emotion.training import (
    Budget,
    FinetuneConfig,
    ModelConfig,
    PretrainConfig,
    TrainVariant,
    finetune_joint,
    pretrain_srfcn,
    train_maxmix,
    train_variant,
)

TINY = Budget(
    pretrain=PretrainConfig(iterations=6, batch_size=4, patch=24),
    finetune=FinetuneConfig(batch_size=8, max_epochs=3),
    model=ModelConfig(widths=(3, 4, 5), hidden=6, init_std=0.05),
    val_fraction=0.25,
)


def plateau_oracle(vals, patience, max_drops, min_delta=1e-4):
    """Epochs at which the rates drop, recomputed from the logged validation scores."""
    best, wait, drops = -np.inf, 0, []
    for e, v in enumerate(vals):
        if v > best + min_delta:
            best, wait = v, 0
        else:
            wait += 1
            if wait >= patience:
                drops.append(e)
                wait = 0
                if len(drops) >= max_drops:
                    break
    return drops


def test_variant_parsing():
    assert TrainVariant.parse("HR") == TrainVariant("HR")
    assert TrainVariant.parse("Non-Joint-8") == TrainVariant("NonJoint", 8)
    assert TrainVariant.parse("Joint-OA").name == "Joint-OA"
    assert TrainVariant.parse("LR-16").name == "LR-16"
    for bad in ("LR-5", "Joint", "XYZ-4", ""):
        with pytest.raises(ValueError):
            TrainVariant.parse(bad)


def test_config_scaling():
    assert PretrainConfig().scaled(2000 / 30000).iterations == 2000
    assert FinetuneConfig(max_epochs=10).scaled(0.25).max_epochs == 2
    with pytest.raises(ValueError):
        FinetuneConfig(plateau_patience=0)
    with pytest.raises(ValueError):
        FinetuneConfig(s_mix=(3, 5))


def test_pretrain_curve_and_errors(small_corpus):
    pairs = concat_pairs([make_pairs(q, 4, target="hr") for q in small_corpus[:2]])
    model, curve = pretrain_srfcn(pairs, PretrainConfig(iterations=5, batch_size=4, patch=24), 0, TINY.model)
    assert curve.shape == (5,) and np.all(curve >= 0)
    empty = Pairs(np.zeros((0, 96, 96)), np.zeros((0, 96, 96)))
    with pytest.raises(ValueError):
        pretrain_srfcn(empty, PretrainConfig(iterations=1), 0, TINY.model)


def _views(seqs, s):
    return concat_pairs([make_pairs(q, s) for q in seqs])


def test_finetune_schedule_and_lr_ledger(small_corpus, monkeypatch):
    cnn = models.build_emocnn(0, (3, 4, 5), 6, init_std=0.05)
    sr = models.build_srfcn(1, (3, 4, 5), init_std=0.05)
    models.transplant(sr, cnn)
    before = {n: p.weights.copy() for n, p in cnn.named().items()}
    seen = []
    real = nn.sgd_step

    def spy(params, grads, velocity, cfg, phase_lr):
        seen.append([phase_lr * p.learn_rate_scale for p in params])
        return real(params, grads, velocity, cfg, phase_lr)

    monkeypatch.setattr(nn, "sgd_step", spy)
    cfg = FinetuneConfig(batch_size=8, max_epochs=12, plateau_patience=1)
    train, val = small_corpus[:3], small_corpus[3:]
    cnn, hist = finetune_joint(cnn, [_views(train, 8)], [_views(val, 8)], [len(q) for q in val], cfg, 0)

    assert hist.steps == len(seen) > 0
    for lrs in seen:  # conv1..3 transplanted, fc and regressor fresh
        assert lrs[0] == lrs[1] == lrs[2] == pytest.approx(0.1 * lrs[3])
        assert lrs[3] == lrs[4]
    for row in hist.rows:
        assert row["lr_pretrained"] == pytest.approx(0.1 * row["lr_fresh"])
    vals = [r["val_ccc"] for r in hist.rows]
    assert hist.drops == plateau_oracle(vals, cfg.plateau_patience, cfg.max_drops)
    lrs = [r["lr_fresh"] for r in hist.rows]
    for e in range(1, len(lrs)):
        expected = lrs[e - 1] / 10 if (e - 1) in hist.drops else lrs[e - 1]
        assert lrs[e] == pytest.approx(expected)
    assert hist.csv_lines()[0] == "epoch,train_loss,val_rmse,val_cc,val_ccc,lr_fresh,lr_pretrained"
    assert len(hist.csv_lines()) == len(hist.rows) + 1

    # smaller steps on the 0.1x layers: mean displacement relative to the fresh layers
    disp = {n: np.abs(p.weights - before[n]).mean() for n, p in cnn.named().items()}
    assert max(disp["conv1"], disp["conv2"], disp["conv3"]) < min(disp["fc"], disp["regressor"])


def test_finetune_rejects_empty(small_corpus):
    cnn = models.build_emocnn(0, (3, 4, 5), 6)
    good = _views(small_corpus[:1], 8)
    empty = Pairs(np.zeros((0, 96, 96)), np.zeros(0))
    with pytest.raises(ValueError):
        finetune_joint(cnn, [empty], [good], [12], FinetuneConfig(), 0)
    with pytest.raises(ValueError):
        finetune_joint(cnn, [good], [empty], [0], FinetuneConfig(), 0)


def test_finetune_rejects_inconsistent_scale(small_corpus):
    cnn = models.build_emocnn(0, (3, 4, 5), 6)
    cnn.named()["conv1"].learn_rate_scale = 0.5
    v = _views(small_corpus[:1], 8)
    with pytest.raises(ValueError):
        finetune_joint(cnn, [v], [v], [12], FinetuneConfig(max_epochs=1), 0)


def test_maxmix_pipeline_audit(small_corpus):
    res = train_maxmix(small_corpus, budget=TINY, seed=0)
    pre = [e for e in res.pipeline_log if e[0] == "pretrain"]
    ft = [e[1] for e in res.pipeline_log if e[0] == "finetune"]
    assert pre and all(e[1] == 16 for e in pre)
    counts = np.bincount(ft, minlength=7)[[3, 4, 6]]
    assert counts.sum() == len(ft)
    assert res.provenance["pretrain_s"] == 16 and res.provenance["finetune_s"] == [3, 4, 6]
    for name in models.CONV_NAMES:
        assert res.recognizer.cnn.named()[name].learn_rate_scale == 0.1


def test_maxmix_mixture_proportions(small_corpus):
    res = train_maxmix(small_corpus, budget=Budget(
        pretrain=TINY.pretrain, finetune=FinetuneConfig(batch_size=8, max_epochs=40, plateau_patience=50),
        model=TINY.model, val_fraction=0.25), seed=1)
    ft = np.array([e[1] for e in res.pipeline_log if e[0] == "finetune"])
    assert len(ft) >= 600
    for s in (3, 4, 6):
        assert abs(np.mean(ft == s) - 1 / 3) < 0.05


def test_variants_pipelines_and_parity(small_corpus):
    counts = {}
    for tag in ("HR", "LR-8", "NonJoint-8", "Joint-8"):
        res = train_variant(tag, small_corpus, TINY, seed=0)
        counts[tag] = res.recognizer.cnn.param_count()
        ft = [e for e in res.pipeline_log if e[0] == "finetune"]
        if tag == "HR":
            assert all(e[1] is None for e in res.pipeline_log)
        else:
            assert all(e[1] == 8 for e in ft)
        if tag == "NonJoint-8":
            assert res.recognizer.sr is res.sr
            assert all(p.learn_rate_scale == 1.0 for p in res.recognizer.cnn.params())
        if tag == "Joint-8":
            assert res.recognizer.sr is None
    counts["Joint-OA"] = train_variant("Joint-OA", small_corpus, TINY, 0).recognizer.cnn.param_count()
    assert len(set(counts.values())) == 1


def test_nonjoint_leaves_sr_untouched(small_corpus, monkeypatch):
    snap = {}
    real = training.finetune_joint

    def wrapped(model, *a, **k):
        snap["sr"] = [p.weights.copy() for p in current["sr"].params()]
        return real(model, *a, **k)

    current = {}
    real_pre = training.pretrain_srfcn

    def pre(*a, **k):
        m, c = real_pre(*a, **k)
        current["sr"] = m
        return m, c

    monkeypatch.setattr(training, "pretrain_srfcn", pre)
    monkeypatch.setattr(training, "finetune_joint", wrapped)
    res = train_variant("NonJoint-4", small_corpus, TINY, 0)
    for a, p in zip(snap["sr"], res.sr.params()):
        np.testing.assert_array_equal(a, p.weights)


def test_same_seed_same_weights(small_corpus):
    a = train_variant("Joint-8", small_corpus, TINY, 3)
    b = train_variant("Joint-8", small_corpus, TINY, 3)
    for pa, pb in zip(a.recognizer.cnn.params(), b.recognizer.cnn.params()):
        np.testing.assert_array_equal(pa.weights, pb.weights)
    assert a.history.csv_lines() == b.history.csv_lines()


def test_regressor_loss_decreases(small_corpus):
    cnn = models.build_emocnn(0, (3, 4, 5), 6, init_std=0.05)
    pairs = _views(small_corpus[:1], 4)
    curve = training.train_regressor(cnn, pairs, 60, 0.01, 0, batch_size=6)
    assert curve[-10:].mean() < curve[:10].mean()
