"""Optimizers, sampling, the adversarial step, and the epoch loop."""

import copy
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poredetect.dataprep import DomainSample
from poredetect.ndgrad import PORE_GROUP, ParamSet, param
from poredetect.porenet import DomainHeadConfig, ResPoreConfig, build_model, load_checkpoint
from poredetect.trainer import (CSV_HEADER, HEAD_PARAM_NAMES, AdamState,
                                CyclicSampler, TrainConfig,
                                TrainingDivergedError, adam_step,
                                finetune_last_layer, iterations_per_epoch,
                                reinitialize_head, sgd_step, stack_batch,
                                train, train_pore_step, train_step)

TINY = ResPoreConfig(input_size=12, stage_channels=(4, 4, 8), blocks_per_stage=1)
TINY_HEAD = DomainHeadConfig(input_dim=144, hidden_dims=(8, 4))


def tiny_model(seed=0):
    return build_model(TINY, TINY_HEAD, seed)


def tiny_batches(rng, n_src=4, n_tgt=3):
    src = rng.random((n_src, 1, 12, 12)).astype(np.float32)
    lab = rng.random((n_src, 1, 12, 12)).astype(np.float32)
    tgt = rng.random((n_tgt, 1, 12, 12)).astype(np.float32)
    return src, lab, tgt


def tiny_samples(rng, n, labeled):
    return [DomainSample(patch=rng.random((12, 12)).astype(np.float32),
                         label=rng.random((12, 12)).astype(np.float32) if labeled else None,
                         domain=0 if labeled else 1)
            for _ in range(n)]


# ---------------------------------------------------------------------------
# config validation

@pytest.mark.parametrize("kwargs", [
    {"batch_size": 0},
    {"learning_rate": 0.0},
    {"learning_rate": -1e-4},
    {"lam": -0.1},
    {"lam": float("inf")},
    {"lam": float("nan")},
    {"epochs": -1},
    {"checkpoint_every": -2},
    {"optimizer": "lbfgs"},
])
def test_train_config_rejects(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_train_config_accepts_zero_lam():
    assert TrainConfig(lam=0.0).lam == 0.0


# ---------------------------------------------------------------------------
# optimizers

def _fake_params(rng, shapes):
    ps = ParamSet()
    for i, shape in enumerate(shapes):
        ps.add(f"p{i}", param(rng.normal(size=shape).astype(np.float32)), PORE_GROUP)
    return ps


def _adam_oracle(values, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook trajectory computed independently, all in float64."""
    m = [np.zeros_like(v, dtype=np.float64) for v in values]
    v = [np.zeros_like(x, dtype=np.float64) for x in values]
    out = [x.astype(np.float64) for x in values]
    for t, step_grads in enumerate(grads, start=1):
        for j, g in enumerate(step_grads):
            m[j] = beta1 * m[j] + (1 - beta1) * g
            v[j] = beta2 * v[j] + (1 - beta2) * g * g
            mh = m[j] / (1 - beta1 ** t)
            vh = v[j] / (1 - beta2 ** t)
            out[j] = out[j] - lr * mh / (np.sqrt(vh) + eps)
    return out


def test_adam_matches_textbook_trajectory(rng):
    shapes = [(2, 3, 1, 1), (1, 1, 4, 4), (5, 1, 1, 1)]
    ps = _fake_params(rng, shapes)
    start = [ps[n].values.copy() for n in ps.names()]
    grads = [[rng.normal(size=s).astype(np.float64) for s in shapes]
             for _ in range(7)]
    state = AdamState()
    for step_grads in grads:
        for n, g in zip(ps.names(), step_grads):
            ps[n].grad = g
        adam_step(ps, state, 0.01)
    want = _adam_oracle(start, grads, 0.01)
    for n, w in zip(ps.names(), want):
        np.testing.assert_allclose(ps[n].values, w, rtol=1e-5, atol=1e-7)


@given(st.floats(1e-3, 10.0), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30)
def test_adam_first_step_is_learning_rate_sized(scale, seed):
    # bias correction makes the first update lr * g/|g| up to the eps term
    rng = np.random.default_rng(seed)
    ps = _fake_params(rng, [(3, 2, 1, 1)])
    g = rng.normal(size=(3, 2, 1, 1)) * scale
    g[np.abs(g) < 1e-2 * scale] = 1e-2 * scale
    before = ps["p0"].values.copy()
    ps["p0"].grad = g
    adam_step(ps, AdamState(), 0.01)
    delta = np.abs(ps["p0"].values - before)
    # a couple of float32 ulps of slack on values of order one
    assert (delta <= 0.01 + 5e-7).all()
    assert (delta >= 0.98 * 0.01 - 5e-7).all()


def test_adam_skips_gradless_params(rng):
    ps = _fake_params(rng, [(2, 2, 1, 1), (2, 2, 1, 1)])
    before = ps["p1"].values.copy()
    ps["p0"].grad = np.ones((2, 2, 1, 1))
    state = AdamState()
    adam_step(ps, state, 0.1)
    assert np.array_equal(ps["p1"].values, before)
    assert "p1" not in state.t and state.t["p0"] == 1


def test_sgd_step_exact(rng):
    ps = _fake_params(rng, [(2, 2, 1, 1)])
    g = rng.normal(size=(2, 2, 1, 1))
    want = ps["p0"].values - (0.5 * g).astype(np.float32)
    ps["p0"].grad = g
    sgd_step(ps, 0.5)
    np.testing.assert_array_equal(ps["p0"].values, want)


def test_per_name_step_counts_stay_independent(rng):
    ps = _fake_params(rng, [(1, 1, 1, 1), (1, 1, 1, 1)])
    state = AdamState()
    ps["p0"].grad = np.ones((1, 1, 1, 1))
    ps["p1"].grad = None
    adam_step(ps, state, 0.01)
    ps["p1"].grad = np.ones((1, 1, 1, 1))
    adam_step(ps, state, 0.01)
    assert state.t == {"p0": 2, "p1": 1}


# ---------------------------------------------------------------------------
# batches and sampling

def test_stack_batch_shapes(rng):
    patches, labels = stack_batch(tiny_samples(rng, 3, labeled=True))
    assert patches.shape == (3, 1, 12, 12) and patches.dtype == np.float32
    assert labels.shape == (3, 1, 12, 12)
    patches, labels = stack_batch(tiny_samples(rng, 2, labeled=False))
    assert labels is None


@given(st.integers(1, 40), st.integers(1, 9), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=40)
def test_cyclic_sampler_uniform_coverage(n, batch, seed):
    sampler = CyclicSampler(n, batch, np.random.default_rng(seed))
    draws = []
    total = 0
    while total < 3 * n:
        idx = sampler.next_indices()
        assert len(idx) == batch
        draws.append(idx)
        total += batch
    counts = np.bincount(np.concatenate(draws), minlength=n)
    # the stream is a concatenation of permutations, so after T draws each
    # index has appeared either floor(T/n) or ceil(T/n) times
    assert counts.min() == total // n or counts.min() == -(-total // n)
    assert set(np.unique(counts)) <= {total // n, -(-total // n)}


def test_cyclic_sampler_deterministic():
    a = CyclicSampler(7, 3, np.random.default_rng(11))
    b = CyclicSampler(7, 3, np.random.default_rng(11))
    for _ in range(6):
        assert np.array_equal(a.next_indices(), b.next_indices())
    with pytest.raises(ValueError):
        CyclicSampler(0, 3, np.random.default_rng(0))


def test_iterations_per_epoch():
    assert iterations_per_epoch(10, 4) == 3
    assert iterations_per_epoch(8, 4) == 2
    assert iterations_per_epoch(1, 8) == 1
    with pytest.raises(ValueError):
        iterations_per_epoch(0, 4)


# ---------------------------------------------------------------------------
# adversarial step

def test_train_step_log_identity(rng):
    model = tiny_model()
    src, lab, tgt = tiny_batches(rng)
    cfg = TrainConfig(batch_size=4, learning_rate=1e-3, lam=0.25, epochs=1)
    entry = train_step(model, cfg, AdamState(), src, lab, tgt, 5, 2)
    assert entry.iteration == 5 and entry.epoch == 2
    for v in (entry.loss_pore, entry.loss_domain_source,
              entry.loss_domain_target, entry.objective):
        assert np.isfinite(v)
    want = entry.loss_pore - 0.25 * (entry.loss_domain_source
                                     + entry.loss_domain_target)
    assert entry.objective == pytest.approx(want, rel=1e-12)


def test_train_step_moves_both_groups(rng):
    model = tiny_model()
    before = {n: g.values.copy() for n, g in model.params.items()}
    src, lab, tgt = tiny_batches(rng)
    cfg = TrainConfig(batch_size=4, learning_rate=1e-3, lam=0.05, epochs=1)
    train_step(model, cfg, AdamState(), src, lab, tgt)
    moved = {n for n, g in model.params.items()
             if not np.array_equal(g.values, before[n])}
    assert any(model.params.group_of(n) == "pore" for n in moved)
    assert any(model.params.group_of(n) == "domain" for n in moved)


def test_zero_lam_matches_domain_free_training(rng):
    """With the reversal strength at zero the pore branch follows exactly the
    same trajectory as plain supervised training; only BN running statistics
    see the extra target batches."""
    adv = tiny_model(3)
    plain = copy.deepcopy(adv)
    src, lab, tgt = tiny_batches(rng)
    cfg = TrainConfig(batch_size=4, learning_rate=1e-3, lam=0.0, epochs=1)
    opt_a, opt_p = AdamState(), AdamState()
    for it in range(3):
        train_step(adv, cfg, opt_a, src, lab, tgt, it)
        train_pore_step(plain, cfg, opt_p, src, lab, it)
    for name in adv.params.group_names(PORE_GROUP):
        np.testing.assert_array_equal(adv.params[name].values,
                                      plain.params[name].values, err_msg=name)


def test_positive_lam_changes_pore_trajectory(rng):
    runs = []
    for lam in (0.0, 0.5):
        model = tiny_model(3)
        src, lab, tgt = tiny_batches(np.random.default_rng(7))
        cfg = TrainConfig(batch_size=4, learning_rate=1e-3, lam=lam, epochs=1)
        opt = AdamState()
        for it in range(3):
            train_step(model, cfg, opt, src, lab, tgt, it)
        runs.append(model.params["conv1.weight"].values.copy())
    assert not np.array_equal(runs[0], runs[1])


def test_non_finite_loss_aborts_without_update(rng):
    model = tiny_model()
    before = {n: g.values.copy() for n, g in model.params.items()}
    src, lab, tgt = tiny_batches(rng)
    src[0, 0, 0, 0] = np.nan
    cfg = TrainConfig(batch_size=4, learning_rate=1e-3, epochs=1)
    with pytest.raises(TrainingDivergedError):
        train_step(model, cfg, AdamState(), src, lab, tgt, iteration=9)
    for n, g in model.params.items():
        np.testing.assert_array_equal(g.values, before[n], err_msg=n)


# ---------------------------------------------------------------------------
# epoch loop

def test_train_writes_artifacts(tmp_path, rng):
    model = tiny_model()
    source = tiny_samples(rng, 6, labeled=True)
    target = tiny_samples(rng, 5, labeled=False)
    cfg = TrainConfig(batch_size=2, learning_rate=1e-3, lam=0.01, epochs=2,
                      checkpoint_every=1, seed=4)
    logs = train(model, source, target, cfg, out_dir=str(tmp_path))
    per_epoch = iterations_per_epoch(5, 2)
    assert len(logs) == 2 * per_epoch
    assert [l.iteration for l in logs] == list(range(1, 2 * per_epoch + 1))
    assert {l.epoch for l in logs} == {1, 2}

    lines = (tmp_path / "train_log.csv").read_text().strip().split("\n")
    assert lines[0] == CSV_HEADER
    assert len(lines) == 1 + len(logs)
    first = lines[1].split(",")
    assert first[0] == "1" and float(first[2]) == pytest.approx(logs[0].loss_pore)

    for name in ("checkpoint_epoch_001.ckpt", "checkpoint_epoch_002.ckpt",
                 "checkpoint_final.ckpt"):
        ck = load_checkpoint(str(tmp_path / name))
        assert ck.meta.lam == 0.01 and ck.meta.seed == 4
    final = load_checkpoint(str(tmp_path / "checkpoint_final.ckpt"))
    assert final.meta.epoch == 2
    np.testing.assert_array_equal(final.params["conv1.weight"].values,
                                  model.params["conv1.weight"].values)


def test_train_is_seed_deterministic(rng):
    results = []
    for _ in range(2):
        model = tiny_model(1)
        source = tiny_samples(np.random.default_rng(5), 6, labeled=True)
        target = tiny_samples(np.random.default_rng(6), 5, labeled=False)
        cfg = TrainConfig(batch_size=2, learning_rate=1e-3, lam=0.01,
                          epochs=1, seed=9)
        train(model, source, target, cfg)
        results.append({n: g.values.copy() for n, g in model.params.items()})
    for name in results[0]:
        np.testing.assert_array_equal(results[0][name], results[1][name])


def test_train_input_validation(rng):
    model = tiny_model()
    cfg = TrainConfig(batch_size=2, epochs=1)
    labeled = tiny_samples(rng, 3, labeled=True)
    unlabeled = tiny_samples(rng, 3, labeled=False)
    with pytest.raises(ValueError):
        train(model, [], unlabeled, cfg)
    with pytest.raises(ValueError):
        train(model, labeled, [], cfg)
    with pytest.raises(ValueError):
        train(model, unlabeled, unlabeled, cfg)  # source must carry labels


# ---------------------------------------------------------------------------
# last-layer fine-tuning

def test_reinitialize_head_touches_only_final_pair():
    model = tiny_model(2)
    before = {n: g.values.copy() for n, g in model.params.items()}
    model.params.stats["bn6"].mean[:] = 3.0
    model.params.stats["bn6"].var[:] = 9.0
    reinitialize_head(model, seed=1)
    for n, g in model.params.items():
        if n not in HEAD_PARAM_NAMES:
            np.testing.assert_array_equal(g.values, before[n], err_msg=n)
    # bias/gamma/beta reinitialize to their constant inits; the conv weight
    # draw is what proves the reinit actually ran
    assert not np.array_equal(model.params["conv6.weight"].values,
                              before["conv6.weight"])
    assert np.all(model.params.stats["bn6"].mean == 0.0)
    assert np.all(model.params.stats["bn6"].var == 1.0)


def test_finetune_freezes_backbone_and_learns(rng):
    model = tiny_model(2)
    backbone_before = {n: g.values.copy() for n, g in model.params.items()
                       if n not in HEAD_PARAM_NAMES}
    samples = tiny_samples(rng, 8, labeled=True)
    cfg = TrainConfig(batch_size=4, learning_rate=5e-3, epochs=12, seed=0)
    losses = finetune_last_layer(model, samples, cfg)
    assert len(losses) == 12 and all(np.isfinite(l) for l in losses)
    assert losses[-1] < losses[0]
    for n, v in backbone_before.items():
        np.testing.assert_array_equal(model.params[n].values, v, err_msg=n)


def test_finetune_cache_and_recompute_agree(rng):
    samples = tiny_samples(rng, 6, labeled=True)
    cfg = TrainConfig(batch_size=4, learning_rate=5e-3, epochs=3, seed=0)
    cached = tiny_model(2)
    finetune_last_layer(cached, samples, cfg)
    uncached = tiny_model(2)
    finetune_last_layer(uncached, samples, cfg, cache_limit_bytes=0)
    for name in HEAD_PARAM_NAMES:
        np.testing.assert_allclose(cached.params[name].values,
                                   uncached.params[name].values,
                                   rtol=1e-6, atol=1e-7, err_msg=name)


def test_finetune_requires_labels(rng):
    model = tiny_model()
    cfg = TrainConfig(batch_size=2, epochs=1)
    with pytest.raises(ValueError):
        finetune_last_layer(model, [], cfg)
    with pytest.raises(ValueError):
        finetune_last_layer(model, tiny_samples(rng, 2, labeled=False), cfg)
