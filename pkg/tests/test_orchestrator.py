import dataclasses

import numpy as np
import pytest

from pfedhr import archzoo, data
from pfedhr.errors import ClassCountMismatch, ConfigInvalid
from pfedhr.nncore import Provenance, compute_loss, forward
from pfedhr.orchestrator import (
    ClientState,
    FedConfig,
    Mode,
    client_update,
    preaverage_same_structure,
    run_experiment,
    server_update,
    setup,
)


def _log_softmax(z):
    z = np.asarray(z, np.float64)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


SMALL = dict(num_clients=4, active_per_round=2, rounds=2, local_epochs=1, finetune_epochs=1)


def _dataset(seed=0, n=600):
    return data.make_synthetic(4, n, 8, seed=seed, scale=1.0)


def _client(template="M2", classes=4, seed=0, n=64):
    ds = data.make_synthetic(classes, n, 8, seed=seed)
    model = archzoo.instantiate(archzoo.get_template(template, classes, vector=True), seed, (8,))
    return ClientState(0, template, model, ds, ds)


def test_defaults_and_validation():
    cfg = FedConfig()
    assert (cfg.num_clients, cfg.active_per_round, cfg.clusters) == (12, 4, 4)
    assert (cfg.local_epochs, cfg.finetune_epochs, cfg.public_fraction) == (10, 3, 0.10)
    assert cfg.kd_lambda == 1.0 and not cfg.preaverage
    assert FedConfig(num_clients=20, active_per_round=10).preaverage
    for bad in (dict(active_per_round=13), dict(clusters=0), dict(kd_lambda=-1), dict(active_per_round=0)):
        with pytest.raises(ConfigInvalid):
            FedConfig(**bad).validate()


def test_kd_loss_at_init_matches_direct_formula():
    client = _client(classes=2)
    teacher = archzoo.instantiate(archzoo.get_template("M1", 2, vector=True), 9, (8,)).eval()
    x, y = client.train.features, client.train.labels
    logits = forward(client.model.eval(), x)
    t_logits = forward(teacher, x)
    ce = -np.mean(_log_softmax(logits)[np.arange(len(y)), y])
    log_t = _log_softmax(t_logits)
    kl = np.mean(np.sum(np.exp(log_t) * (log_t - _log_softmax(logits)), axis=1))
    total = compute_loss("CROSS_ENTROPY", logits, y) + compute_loss("KL_DIVERGENCE", logits, t_logits)
    assert total.value == pytest.approx(ce + kl, rel=1e-5)


def test_kd_against_own_copy_is_zero():
    client = _client()
    x = client.train.features
    logits = forward(client.model.eval(), x)
    assert compute_loss("KL_DIVERGENCE", logits, forward(client.model.clone().eval(), x)).value == pytest.approx(0, abs=1e-6)


def test_lambda_zero_equals_plain_training():
    cfg = FedConfig(local_epochs=2)
    a, b = _client(), _client()
    teacher = archzoo.instantiate(archzoo.get_template("M3", 4, vector=True), 5, (8,))
    client_update(a, None, cfg, np.random.default_rng(1))
    client_update(b, teacher, dataclasses.replace(cfg, kd_lambda=0.0), np.random.default_rng(1))
    sa, sb = a.model.state(), b.model.state()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_teacher_is_frozen_and_class_checked():
    client = _client()
    teacher = archzoo.instantiate(archzoo.get_template("M3", 4, vector=True), 5, (8,))
    before = teacher.state()
    client_update(client, teacher, FedConfig(local_epochs=1), np.random.default_rng(0))
    assert all(np.array_equal(before[k], v) for k, v in teacher.state().items())
    wrong = archzoo.instantiate(archzoo.get_template("M1", 3, vector=True), 5, (8,))
    with pytest.raises(ClassCountMismatch):
        client_update(client, wrong, FedConfig(local_epochs=1), np.random.default_rng(0))


def test_preaverage_arithmetic():
    t = archzoo.get_template("M1", 4, vector=True)
    a = archzoo.instantiate(t, 0, (8,))
    b = a.clone()
    a.layers[0].params["weight"][:] = 1.0
    b.layers[0].params["weight"][:] = 3.0
    (gid, avg), = preaverage_same_structure([(0, a), (1, b)])
    assert np.all(avg.layers[0].params["weight"] == 2.0)
    assert avg.layers[0].provenance == Provenance("averaged", gid, 0)
    same, = preaverage_same_structure([(0, a), (1, a.clone())])
    np.testing.assert_array_equal(same[1].layers[1].params["weight"], a.layers[1].params["weight"])


def test_preaverage_group_count():
    temps = archzoo.templates_for((8,), 4)
    uploads = [(i, archzoo.instantiate(temps[i % 4], i, (8,))) for i in range(10)]
    reduced = preaverage_same_structure(uploads)
    assert len(reduced) == 4
    assert sorted(m.template for _, m in reduced) == list(archzoo.TEMPLATE_IDS)


def test_server_update_returns_one_model_per_upload():
    ds = _dataset()
    cfg = FedConfig(**SMALL, mode=Mode.PFEDHR)
    fed = setup(cfg, ds)
    uploads = [(c.client_id, c.model) for c in fed.clients]
    snap = [m.state() for _, m in uploads]
    trace = server_update(uploads, fed.public, cfg, seed=0)
    assert sorted(trace.personalized) == [c.client_id for c in fed.clients]
    assert len(trace.candidate_dumps) <= cfg.max_candidates
    for (_, m), s in zip(uploads, snap):  # uploads are never mutated
        assert all(np.array_equal(s[k], v) for k, v in m.state().items())
    for m in trace.personalized.values():
        assert m.num_classes == 4


def test_server_update_single_upload():
    ds = _dataset()
    cfg = FedConfig(**SMALL)
    fed = setup(cfg, ds)
    trace = server_update([(0, fed.clients[0].model)], fed.public, cfg, seed=0)
    assert list(trace.personalized) == [0]
    assert trace.clusters <= trace.num_layers


def test_zero_rounds():
    assert run_experiment(FedConfig(**{**SMALL, "rounds": 0}), _dataset()) == []


def test_unselected_clients_unchanged_and_deterministic():
    ds = _dataset()
    cfg = FedConfig(**{**SMALL, "rounds": 1}, mode=Mode.PFEDHR)
    feds = []
    fresh = setup(cfg, ds)
    reports = run_experiment(cfg, ds, federation_out=feds)
    for c0, c1 in zip(fresh.clients, feds[0].clients):
        unchanged = all(np.array_equal(v, c1.model.state()[k]) for k, v in c0.model.state().items())
        assert unchanged == (c0.client_id not in reports[0].selected)
        if c0.client_id not in reports[0].selected:
            assert c1.personalized is None
    again = run_experiment(cfg, ds)
    assert [r.accuracies for r in again] == [r.accuracies for r in reports]


def test_accuracy_bounds_and_candidate_cap():
    cfg = FedConfig(**{**SMALL, "max_candidates": 1}, mode=Mode.PFEDHR)
    for r in run_experiment(cfg, _dataset()):
        assert all(0.0 <= a <= 1.0 for a in r.accuracies)
        assert len(r.accuracies) == cfg.num_clients and r.num_candidates <= 1


def test_fedavg_iid_improves():
    ds = data.make_synthetic(4, 1200, 8, seed=0, scale=1.0)
    cfg = FedConfig(mode=Mode.FEDAVG_PER_STRUCTURE, scheme="IID", rounds=20, local_epochs=2, seed=0)
    reports = run_experiment(cfg, ds)
    assert reports[-1].mean_acc >= reports[0].mean_acc
