"""Tests for the meta-learning trainer."""

import numpy as np
import pytest

from metaseg import tensor as T
from metaseg.data import AugmentationConfig, DomainSample, DomainSet
from metaseg.network import DecoderConfig, EncoderConfig, SegModel
from metaseg.training import (
    EpochSampler,
    HyperParams,
    TrainError,
    batch_loss,
    evaluate,
    inner_update,
    joint_step,
    meta_step,
    poly_lr,
    train,
    write_logs,
)

NC = 3


def tiny_model(seed=0):
    return SegModel(EncoderConfig(channels=(4, 6, 8, 10)),
                    DecoderConfig(patch=2, ratios=(2,), embed=16, num_classes=NC),
                    seed=seed)


def make_samples(rng, n, size=32, labelled=True, prefix="s"):
    out = []
    for i in range(n):
        img = rng.random((size, size, 3), dtype=np.float32)
        lab = rng.integers(0, NC, size=(size, size)).astype(np.uint8) \
            if labelled else None
        out.append(DomainSample(image=img, label=lab, id=f"{prefix}{i:03d}"))
    return out


def make_domains(rng, n_sources=2, n_per=3):
    sources = {f"src{k}": DomainSet(name=f"src{k}",
                                    samples=make_samples(rng, n_per, prefix=f"d{k}_"),
                                    role="source")
               for k in range(n_sources)}
    tgt_train = DomainSet(name="tgt", role="target",
                          samples=make_samples(rng, n_per, labelled=False,
                                               prefix="t_"))
    tgt_eval = DomainSet(name="tgt_eval", role="target",
                         samples=make_samples(rng, 2, prefix="e_"),
                         n_labelled=2)
    return sources, tgt_train, tgt_eval


IDENTITY_AUG = AugmentationConfig(resize_range=(1.0, 1.0), flip_prob=0.5,
                                  blur_prob=0.0, crop=(32, 32))


# ---------------------------------------------------------------------------
# schedule and plumbing
# ---------------------------------------------------------------------------

def test_poly_lr_worked_examples():
    assert poly_lr(5e-3, 0, 100) == 5e-3
    assert abs(poly_lr(5e-3, 50, 100) - 5e-3 * 0.5 ** 0.9) < 1e-15
    assert abs(poly_lr(1.0, 99, 100, power=1.0) - 0.01) < 1e-12
    assert poly_lr(1e-3, 100, 100) == 0.0
    with pytest.raises(TrainError):
        poly_lr(1e-3, 101, 100)
    with pytest.raises(TrainError):
        poly_lr(1e-3, -1, 100)


def test_hyperparams_validation():
    with pytest.raises(TrainError):
        HyperParams(iterations=-1)
    HyperParams(iterations=0)  # legal: "just initialize", rejected by train()
    with pytest.raises(TrainError):
        HyperParams(outer_lr=0.0)
    HyperParams(inner_lr=0.0)  # eta = 0 is a legal degenerate case


def test_epoch_sampler_covers_each_epoch():
    samples = list("abcdef")
    sampler = EpochSampler(samples, np.random.default_rng(0))
    first = [sampler.next() for _ in range(6)]
    second = [sampler.next() for _ in range(6)]
    assert sorted(first) == samples and sorted(second) == samples


def test_epoch_sampler_deterministic():
    a = EpochSampler(list(range(9)), np.random.default_rng(4))
    b = EpochSampler(list(range(9)), np.random.default_rng(4))
    assert [a.next() for _ in range(20)] == [b.next() for _ in range(20)]


def test_batch_loss_is_mean_of_sample_losses():
    m = tiny_model()
    rng = np.random.default_rng(1)
    samples = [(rng.random((32, 32, 3), dtype=np.float32),
                rng.integers(0, NC, size=(32, 32)).astype(np.uint8))
               for _ in range(3)]
    with T.no_grad():
        total = float(batch_loss(m, samples, mode="batch").data)
        singles = [float(batch_loss(m, [s], mode="batch").data) for s in samples]
    assert abs(total - np.mean(singles)) < 1e-5


def test_inner_update_produces_fresh_leaves():
    m = tiny_model()
    grads = {n: np.ones_like(p.value.data) for n, p in m.params.items()}
    virt = inner_update(m, grads, 0.1)
    for n, p in m.params.items():
        assert virt[n] is not p.value
        assert np.allclose(virt[n].data, p.value.data - 0.1)
        assert virt[n].requires_grad


# ---------------------------------------------------------------------------
# meta step semantics
# ---------------------------------------------------------------------------

def _fixed_batches(rng):
    mk = lambda: (rng.random((32, 32, 3), dtype=np.float32),
                  rng.integers(0, NC, size=(32, 32)).astype(np.uint8))
    return [mk(), mk()], [mk()]


def test_meta_step_zero_inner_lr_equals_joint_update():
    """With eta = 0 the combined step is one SGD step on alpha*L1 + L2."""
    with T.precision(np.float64):
        rng = np.random.default_rng(2)
        meta_train, meta_test = _fixed_batches(rng)
        hp = HyperParams(inner_lr=0.0, outer_lr=1e-2, alpha=1.0,
                         momentum=0.9, weight_decay=5e-4, iterations=10)

        a = tiny_model(seed=7)
        meta_step(a, meta_train, meta_test, hp, iteration=0)

        b = tiny_model(seed=7)
        b.zero_grad()
        batch_loss(b, meta_train).backward()
        g1 = {n: p.grad.copy() for n, p in b.params.items()}
        b.zero_grad()
        batch_loss(b, meta_test).backward()
        for n, p in b.params.items():
            p.value.grad = hp.alpha * g1[n] + p.grad
        T.sgd_update(b.parameters(), poly_lr(hp.outer_lr, 0, hp.iterations),
                     hp.momentum, hp.weight_decay)

        for n in a.params:
            diff = np.abs(a.params[n].value.data - b.params[n].value.data).max()
            assert diff < 1e-12, n


def test_meta_step_inner_lr_changes_update():
    rng = np.random.default_rng(3)
    meta_train, meta_test = _fixed_batches(rng)
    a, b = tiny_model(seed=8), tiny_model(seed=8)
    hp0 = HyperParams(inner_lr=0.0, iterations=10)
    hp1 = HyperParams(inner_lr=0.5, iterations=10)
    meta_step(a, meta_train, meta_test, hp0, 0)
    meta_step(b, meta_train, meta_test, hp1, 0)
    assert any(not np.allclose(a.params[n].value.data, b.params[n].value.data)
               for n in a.params)


def test_meta_step_report_fields():
    rng = np.random.default_rng(4)
    meta_train, meta_test = _fixed_batches(rng)
    hp = HyperParams(iterations=4, alpha=0.5)
    r = meta_step(tiny_model(), meta_train, meta_test, hp, 1)
    assert r.iteration == 1
    assert abs(r.total_loss - (r.meta_test_loss + 0.5 * r.meta_train_loss)) < 1e-9
    assert abs(r.inner_lr - poly_lr(hp.inner_lr, 1, 4)) < 1e-15
    assert abs(r.outer_lr - poly_lr(hp.outer_lr, 1, 4)) < 1e-15


def test_repeated_steps_reduce_training_loss():
    rng = np.random.default_rng(5)
    img = rng.random((32, 32, 3), dtype=np.float32)
    lab = rng.integers(0, NC, size=(32, 32)).astype(np.uint8)
    m = tiny_model(seed=9)
    hp = HyperParams(outer_lr=0.05, iterations=200)
    losses = [joint_step(m, [(img, lab)], hp, it).total_loss for it in range(12)]
    assert losses[-1] < losses[0]


# ---------------------------------------------------------------------------
# full training loop
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("method", ["baseline", "meta", "meta_mdms"])
def test_train_smoke_all_methods(method):
    rng = np.random.default_rng(6)
    sources, tgt_train, tgt_eval = make_domains(rng)
    hp = HyperParams(iterations=4, eval_every=2, crop=(32, 32), calib_images=2)
    state = train(tiny_model(), sources, tgt_train, tgt_eval, hp,
                  method=method, aug=IDENTITY_AUG)
    assert len(state.step_log) == 4
    assert [it for it, _ in state.eval_log] == [2, 4]
    assert 0.0 <= state.final_miou <= 1.0
    if method == "baseline":
        assert all(r.meta_test_loss == 0.0 for r in state.step_log)
    else:
        assert all(np.isfinite(r.meta_test_loss) for r in state.step_log)


def test_train_meta_works_with_single_source():
    rng = np.random.default_rng(7)
    sources, tgt_train, tgt_eval = make_domains(rng, n_sources=1)
    hp = HyperParams(iterations=2, crop=(32, 32), calib_images=1)
    state = train(tiny_model(), sources, tgt_train, tgt_eval, hp,
                  method="meta", aug=IDENTITY_AUG)
    assert len(state.step_log) == 2


def test_train_is_deterministic_given_seed():
    rng = np.random.default_rng(8)
    sources, tgt_train, tgt_eval = make_domains(rng)
    hp = HyperParams(iterations=3, crop=(32, 32), calib_images=1, seed=5)
    a = train(tiny_model(seed=1), sources, tgt_train, tgt_eval, hp,
              method="meta_mdms", aug=IDENTITY_AUG)
    b = train(tiny_model(seed=1), sources, tgt_train, tgt_eval, hp,
              method="meta_mdms", aug=IDENTITY_AUG)
    assert a.final_miou == b.final_miou
    for n in a.model.params:
        assert np.array_equal(a.model.params[n].value.data,
                              b.model.params[n].value.data)


def test_train_rejects_unknown_method_and_empty_sources():
    rng = np.random.default_rng(9)
    sources, tgt_train, tgt_eval = make_domains(rng)
    hp = HyperParams(iterations=1, crop=(32, 32))
    with pytest.raises(TrainError, match="unknown method"):
        train(tiny_model(), sources, tgt_train, tgt_eval, hp, method="mdms")
    with pytest.raises(TrainError, match="source"):
        train(tiny_model(), {}, tgt_train, tgt_eval, hp)


def test_evaluate_requires_labelled_samples():
    rng = np.random.default_rng(10)
    unlabelled = DomainSet(name="t", role="target",
                           samples=make_samples(rng, 2, labelled=False))
    with pytest.raises(TrainError, match="no labelled"):
        evaluate(tiny_model(), unlabelled)


def test_write_logs_creates_files(tmp_path):
    rng = np.random.default_rng(11)
    sources, tgt_train, tgt_eval = make_domains(rng)
    hp = HyperParams(iterations=2, crop=(32, 32), calib_images=1)
    state = train(tiny_model(), sources, tgt_train, tgt_eval, hp,
                  method="baseline", aug=IDENTITY_AUG, log_dir=str(tmp_path))
    for fname in ("steps.csv", "eval.csv", "report.txt"):
        assert (tmp_path / fname).exists()
    lines = (tmp_path / "steps.csv").read_text().strip().splitlines()
    assert len(lines) == 3  # header + 2 iterations
    assert lines[0].startswith("iteration,")
