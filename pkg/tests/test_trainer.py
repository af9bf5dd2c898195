import math

import numpy as np
import pytest

from smckit import tensor as T
from smckit.data import EpochSampler, make_batch
from smckit.losses import lambda_schedule
from smckit.trainer import (
    LOG_COLUMNS, TrainConfig, config_hash, dlb_step, lsr_step, new_state, run_experiment, run_step, sam_step,
    sam_update, smc_train_step, vanilla_step, write_run_log,
)

from conftest import synthetic_images

SMALL = dict(arch="small_cnn", hidden=(4, 4, 8), batch_size=16, epochs=2, lr=0.05)


def cfg(**kw):
    return TrainConfig(**{**SMALL, **kw})


def batches(ds, n=16, seed=0):
    return [make_batch(ds, b) for b in EpochSampler(len(ds), n, seed, 1).batches(0)]


def test_config_validation():
    with pytest.raises(ValueError, match="k=1"):
        TrainConfig(method="smc", k=1)
    for bad in (dict(tau=0), dict(alpha=1.2), dict(lsr_eps=1.0), dict(sam_rho=-1), dict(method="mixup"),
                dict(augment=("rotate",)), dict(dtype="float16")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_lr_milestones():
    c = TrainConfig(epochs=30, lr=0.1)
    assert [c.lr_at(e) for e in (0, 14, 15, 21, 22)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001])


def test_smc_cold_start_is_ce(tiny_train):
    state = new_state(cfg(method="smc"), tiny_train)
    b = batches(tiny_train)
    res = smc_train_step(state, b[0], b[1])
    assert res.breakdown.kl == [] and res.breakdown.total == res.breakdown.ce
    res = smc_train_step(state, b[1], b[2])
    assert len(res.breakdown.kl) == 1


def test_smc_three_channels_two_kl_terms(tiny_train):
    state = new_state(cfg(method="smc", k=3), tiny_train)
    b = batches(tiny_train)
    counts = [len(smc_train_step(state, b[i], b[i + 1]).breakdown.kl) for i in range(3)]
    assert counts == [0, 2, 2]


def test_smc_rejects_stale_buffer(tiny_train):
    state = new_state(cfg(method="smc"), tiny_train)
    b = batches(tiny_train)
    smc_train_step(state, b[0], b[1])
    state.buffer = {}
    with pytest.raises(RuntimeError):
        smc_train_step(state, b[1], b[2])


def test_smc_misaligned_buffer_raises(tiny_train):
    state = new_state(cfg(method="smc"), tiny_train)
    b = batches(tiny_train)
    smc_train_step(state, b[0], b[2])
    with pytest.raises(RuntimeError):
        smc_train_step(state, b[1], b[2])


def test_alpha_zero_matches_vanilla(tiny_train):
    a = new_state(cfg(method="smc", alpha=0.0), tiny_train)
    v = new_state(cfg(method="vanilla"), tiny_train)
    for step in EpochSampler(len(tiny_train), 16, 0, 2):
        ra, rv = run_step(a, step), run_step(v, step)
        assert ra.breakdown.total == rv.breakdown.total
        assert a.params.identical(v.params)


def test_channel_order_and_parallel_give_same_buffer(tiny_train, monkeypatch):
    b = batches(tiny_train)
    runs = {}
    for name, kw in (("seq", {}), ("par", dict(parallel_channels=True))):
        state = new_state(cfg(method="smc", k=4, **kw), tiny_train)
        smc_train_step(state, b[0], b[1])
        runs[name] = state
    monkeypatch.setenv("SMC_NUM_THREADS", "2")
    state = new_state(cfg(method="smc", k=4, parallel_channels=True), tiny_train)
    smc_train_step(state, b[0], b[1])
    runs["two"] = state
    for c in "BCD":
        for other in ("par", "two"):
            np.testing.assert_array_equal(runs["seq"].buffer[c].probs, runs[other].buffer[c].probs)
    assert list(runs["seq"].buffer) == ["B", "C", "D"]


def test_vanilla_initial_loss_is_log_k(tiny_train):
    state = new_state(cfg(), tiny_train)
    state.params.values["fc2.w"][:] = 0
    res = vanilla_step(state, batches(tiny_train)[0])
    assert res.breakdown.total == pytest.approx(math.log(tiny_train.num_classes), abs=1e-12)


def test_lsr_zero_matches_vanilla(tiny_train):
    a, v = new_state(cfg(), tiny_train), new_state(cfg(), tiny_train)
    for b in batches(tiny_train):
        assert lsr_step(a, b, eps=0.0).breakdown.total == vanilla_step(v, b).breakdown.total
    assert a.params.identical(v.params)


def test_lsr_uniform_prediction_loss():
    ds = synthetic_images(20, num_classes=10)
    state = new_state(cfg(batch_size=20), ds)
    state.params.values["fc2.w"][:] = 0
    res = lsr_step(state, make_batch(ds, np.arange(20)), eps=0.1)
    assert res.breakdown.total == pytest.approx(math.log(10), abs=1e-12)


def test_sam_quadratic_example():
    p = T.ParameterSet({"w": np.array(1.0)})
    seen = []

    def loss_and_grads(values):
        seen.append(float(values["w"]))
        return float(values["w"] ** 2), {"w": 2 * values["w"]}

    loss = sam_update(p, loss_and_grads, rho=0.5, lr=0.1)
    assert loss == 1.0 and seen == [1.0, 1.5]
    assert p["w"] == pytest.approx(0.7, abs=1e-15)


def test_sam_perturbation_norm_is_rho():
    rng = np.random.default_rng(0)
    w0 = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    g = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    seen = []

    def loss_and_grads(values):
        seen.append({k: v.copy() for k, v in values.items()})
        return 0.0, g

    sam_update(T.ParameterSet(w0), loss_and_grads, rho=0.3, lr=0.1)
    eps = np.concatenate([(seen[1][k] - w0[k]).ravel() for k in w0])
    assert np.linalg.norm(eps) == pytest.approx(0.3, abs=1e-12)


def test_sam_zero_rho_matches_vanilla(tiny_train):
    a, v = new_state(cfg(), tiny_train), new_state(cfg(), tiny_train)
    for b in batches(tiny_train):
        sam_step(a, b, rho=0.0)
        vanilla_step(v, b)
    assert a.params.identical(v.params)


def test_dlb_shapes(tiny_train):
    b = [make_batch(tiny_train, idx) for idx in EpochSampler(60, 16, 0, 1).batches(0)]
    ds = tiny_train.subset(np.arange(60))
    state, v = new_state(cfg(method="dlb"), ds), new_state(cfg(), ds)
    r0 = dlb_step(state, None, b[0])
    vanilla_step(v, b[0])
    assert r0.breakdown.kl == [] and r0.ce_rows == 16
    assert state.params.identical(v.params)
    r1 = dlb_step(state, b[0], b[1])
    assert r1.ce_rows == 32 and len(r1.breakdown.kl) == 1
    np.testing.assert_array_equal(r1.teacher_indices[0], b[0].indices)
    np.testing.assert_array_equal(r1.student_indices, b[0].indices)
    r3 = dlb_step(state, b[1], b[3])
    assert r3.ce_rows == 16 + 12 and len(r3.teacher_indices[0]) == 16


def test_lambda_reaches_alpha_at_last_step(tiny_train):
    lams = []
    res = run_experiment(cfg(method="smc", alpha=0.8), tiny_train, tiny_train.with_stats(tiny_train.mean, tiny_train.std),
                         on_step=lambda st, r: lams.append(r.breakdown.lam))
    S = len(res.steps)
    assert S == 8
    assert lams == [lambda_schedule(0.8, s + 1, S) for s in range(S)]
    assert lams[-1] == pytest.approx(0.8, abs=1e-12)


def test_buffer_alignment_over_run(tiny_train, tiny_val):
    seen = []
    run_experiment(cfg(method="smc", k=3, epochs=3), tiny_train, tiny_val, on_step=lambda st, r: seen.append((st, r)))
    for st, r in seen:
        if st.global_step == 0:
            assert r.teacher_indices == []
            continue
        assert len(r.teacher_indices) == 2
        for t in r.teacher_indices:
            np.testing.assert_array_equal(t, st.indices)


def test_zero_epochs_logs_init_row(tiny_train, tiny_val, tmp_path):
    res = run_experiment(cfg(epochs=0), tiny_train, tiny_val, out_dir=tmp_path)
    assert len(res.records) == 1 and res.records[0].epoch == 0
    lines = [l for l in (tmp_path / "run_log.csv").read_text().splitlines() if not l.startswith("#")]
    assert lines[0] == ",".join(LOG_COLUMNS) and len(lines) == 2
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "final.ckpt").exists()


def test_run_log_is_deterministic(tiny_train, tiny_val, tmp_path):
    for d in ("a", "b"):
        run_experiment(cfg(method="smc"), tiny_train, tiny_val, out_dir=tmp_path / d)
    assert (tmp_path / "a" / "run_log.csv").read_bytes() == (tmp_path / "b" / "run_log.csv").read_bytes()


def test_run_log_records_noise(tiny_train, tiny_val):
    res = run_experiment(cfg(noise_eta=0.25, epochs=1), tiny_train, tiny_val)
    assert res.noise_mask.sum() == 16


def test_best_and_final(tiny_train, tiny_val, tmp_path):
    res = run_experiment(cfg(epochs=3), tiny_train, tiny_val, out_dir=tmp_path)
    vals = [r.val_top1 for r in res.records[1:]]
    assert res.best_val == max(vals) and res.best_epoch == 1 + vals.index(max(vals))
    assert res.final_val == vals[-1] and res.gap >= 0


def test_config_hash_ignores_seed():
    a = {"method": "smc", "seed": 1, "output_dir": "x", "tau": 1.0}
    b = {"method": "smc", "seed": 2, "output_dir": "y", "tau": 1.0}
    assert config_hash(a) == config_hash(b) != config_hash({**a, "tau": 2.0})


def test_wall_clock_column_opt_in(tiny_train, tiny_val, tmp_path):
    res = run_experiment(cfg(epochs=1, log_wall_clock=True), tiny_train, tiny_val)
    write_run_log(tmp_path / "log.csv", res)
    last = (tmp_path / "log.csv").read_text().splitlines()[-1]
    assert last.split(",")[-1] != ""


def test_channel_forwards_commute(tiny_train):
    from smckit.trainer import _channel_labels

    state = new_state(cfg(method="smc", k=3), tiny_train)
    look = batches(tiny_train)[1]
    fwd = {c: _channel_labels(state, look, c, 0) for c in "BC"}
    rev = {c: _channel_labels(state, look, c, 0) for c in "CB"}
    for c in "BC":
        np.testing.assert_array_equal(fwd[c].probs, rev[c].probs)
