"""
Federation engine tests:
- Cross-correlation and Barlow Twins loss values
- Local objectives: reductions, gradient isolation, finite-difference checks
- Local training schedule and FedAvg aggregation
- Server loop: determinism, reduction chain, threading, failures, local-only
- FLConfig validation
- Desk-scale experiments: FedAvg against local training, stain-shift degradation (slow)
"""

import dataclasses
import os

import numpy as np
import pytest

from conftest import PROJECT_ROOT, max_rel_err
from core.autodiff import CompGraph, backward, finite_diff_grad, sgd_step
from core.config import ExperimentConfig
from core.evaluation import cross_validate, evaluate_model
from core.federation import (FLConfig, aggregate, baseline_objective, bt_loss, cross_correlation,
                             initial_global_model, local_objective, make_client, party_local_training,
                             run_federation, sup_loss)
from core.models import FL_SEGMENTS, TinyNet, encode, init_weights, project
from core.ssl_pretrain import ce_term
from core.synthdata import CenterDataset, batch_slices, generate_center_dataset, kfold_split
from core.tensor import ParamSet, Tensor
from core.types import Algorithm, ClientError, ConfigError, ContractError, StructuralError, ViewMode
from utils.seeding import rng_for


# ---------------------------------------------------------------------------
# Cross-correlation and BT loss
# ---------------------------------------------------------------------------

def test_cross_correlation_matches_formula():
    z = np.array([[1.0, 2.0], [3.0, 4.0]])
    c = cross_correlation(Tensor(z), Tensor(z)).array
    norms = np.sqrt((z * z).sum(axis=0))
    expected = (z.T @ z) / (np.outer(norms, norms) + 1e-12)
    assert np.allclose(c, expected, atol=1e-12)
    assert c[0, 1] == pytest.approx(14.0 / np.sqrt(200.0), abs=1e-12)


def test_orthonormal_columns_give_identity():
    z = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]))
    assert np.allclose(cross_correlation(z, z).array, np.eye(2), atol=1e-9)


def test_zero_column_gives_zero_row_without_nan():
    zl = Tensor(np.array([[0.0, 1.0], [0.0, 2.0]]))
    zg = Tensor(np.array([[1.0, 1.0], [2.0, -1.0]]))
    c = cross_correlation(zl, zg).array
    assert np.all(np.isfinite(c))
    assert np.all(c[0] == 0.0)


def test_cross_correlation_contracts():
    with pytest.raises(ContractError):
        cross_correlation(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))))
    with pytest.raises(StructuralError):
        cross_correlation(Tensor(np.ones((4, 3))), Tensor(np.ones((4, 2))))


def test_cross_correlation_is_bounded():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        b, d = rng.integers(2, 6), rng.integers(1, 4)
        c = cross_correlation(Tensor(rng.normal(size=(b, d))), Tensor(rng.normal(size=(b, d)))).array
        assert np.all(np.abs(c) <= 1.0 + 1e-9)


def test_centered_correlation_removes_column_offsets():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(6, 3))
    plain = cross_correlation(Tensor(z), Tensor(z), centered=True).array
    shifted = cross_correlation(Tensor(z + 5.0), Tensor(z - 2.0), centered=True).array
    assert np.allclose(plain, shifted, atol=1e-9)


@pytest.mark.parametrize("seed", range(50))
def test_identical_projections_align_perfectly(seed):
    z = Tensor(np.random.default_rng(seed).normal(size=(8, 4)))
    c = cross_correlation(z, z).array
    assert np.sum((1.0 - np.diag(c)) ** 2) < 1e-10


def test_bt_loss_examples():
    assert bt_loss(Tensor(np.eye(3)), 0.005) == 0.0
    assert abs(bt_loss(Tensor([[1.0, -1.0], [-1.0, 1.0]]), 0.005) - 0.01) < 1e-15
    assert bt_loss(Tensor(np.zeros((2, 2))), 0.005) == 2.0


# ---------------------------------------------------------------------------
# Supervised loss
# ---------------------------------------------------------------------------

def test_sup_loss_values():
    assert sup_loss(Tensor([[50.0, 0.0, 0.0, 0.0]]), [0]) <= 1e-11
    assert abs(sup_loss(Tensor(np.zeros((2, 4))), [1, 3]) - np.log(4.0)) < 1e-12
    logits = np.random.default_rng(2).normal(size=(5, 3))
    labels = [0, 2, 1, 1, 0]
    by_hand = -np.mean([logits[i, y] - np.log(np.exp(logits[i]).sum()) for i, y in enumerate(labels)])
    assert abs(sup_loss(Tensor(logits), labels) - by_hand) < 1e-12


# ---------------------------------------------------------------------------
# Local objectives
# ---------------------------------------------------------------------------

def _active_weights(spec, seed):
    """FL weights with positive biases so no ReLU layer is dead over a small batch."""
    w = init_weights(spec, seed, FL_SEGMENTS)
    rng = np.random.default_rng(seed + 500)
    biases = [(n, Tensor(rng.uniform(0.1, 0.5, size=w[n].shape))) for n in w if n.endswith(".bias")]
    return w.replace(ParamSet(biases))


def _batch(spec, n, seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n,) + spec.input_dims), rng.integers(0, spec.n_classes, size=n)


def test_mu_zero_equals_fedavg_objective(small_spec):
    net = TinyNet(small_spec)
    w, wg = _active_weights(small_spec, 1), _active_weights(small_spec, 2)
    x, y = _batch(small_spec, 4, 0)
    loss_bt, grad_bt = local_objective(net, w, wg, x, y, mu=0.0, lam=0.005)
    loss_avg, grad_avg = baseline_objective(Algorithm.FEDAVG, net, w, wg, x, y)
    assert loss_bt == loss_avg
    assert grad_bt.bit_equal(grad_avg)


def test_gradients_reach_only_the_local_model(small_spec):
    net = TinyNet(small_spec)
    w, wg = _active_weights(small_spec, 1), _active_weights(small_spec, 2)
    x, y = _batch(small_spec, 4, 0)
    losses, grads = local_objective(net, w, wg, x, y, mu=1.0, lam=0.005)
    assert grads.names() == w.names()
    assert losses.l_total == pytest.approx(losses.l_sup + losses.l_flbt, abs=1e-12)


def test_contrastive_term_matches_value_level_loss(small_spec):
    net = TinyNet(small_spec)
    w, wg = _active_weights(small_spec, 1), _active_weights(small_spec, 2)
    x, y = _batch(small_spec, 4, 0)
    losses, _ = local_objective(net, w, wg, x, y, mu=1.0, lam=0.005)
    zl = project(encode(Tensor(x), w, small_spec), w, small_spec)
    zg = project(encode(Tensor(x), wg, small_spec), wg, small_spec)
    assert losses.l_flbt == pytest.approx(bt_loss(cross_correlation(zl, zg), 0.005), abs=1e-12)


def test_identity_views_match_plain_views(small_spec):
    net = TinyNet(small_spec)
    w, wg = _active_weights(small_spec, 1), _active_weights(small_spec, 2)
    x, y = _batch(small_spec, 4, 0)
    plain = local_objective(net, w, wg, x, y, mu=1.0, lam=0.005)
    viewed = local_objective(net, w, wg, x, y, mu=1.0, lam=0.005, views=(0, 0))
    assert plain[0] == viewed[0]
    assert plain[1].bit_equal(viewed[1])


@pytest.mark.parametrize("centered", [False, True])
@pytest.mark.parametrize("seed", range(5))
def test_local_objective_gradient(tiny_spec, seed, centered):
    net = TinyNet(tiny_spec)
    w, wg = _active_weights(tiny_spec, seed), _active_weights(tiny_spec, seed + 50)
    x, y = _batch(tiny_spec, 3, seed)

    def f(ps):
        return local_objective(net, ps, wg, x, y, mu=0.5, lam=0.005, centered=centered)[0].l_total

    _, analytic = local_objective(net, w, wg, x, y, mu=0.5, lam=0.005, centered=centered)
    err = max_rel_err(analytic, finite_diff_grad(f, w))
    assert err < 1e-4, f"seed {seed}: relative gradient error {err:.3g}"


def test_contrastive_term_needs_two_samples(small_spec):
    net = TinyNet(small_spec)
    w = _active_weights(small_spec, 1)
    x, y = _batch(small_spec, 1, 0)
    with pytest.raises(ContractError):
        local_objective(net, w, w, x, y, mu=0.01, lam=0.005)


def test_baseline_rejects_fl_bt(small_spec):
    w = _active_weights(small_spec, 1)
    x, y = _batch(small_spec, 2, 0)
    with pytest.raises(ContractError):
        baseline_objective(Algorithm.FL_BT, TinyNet(small_spec), w, w, x, y)


def test_fedprox_with_zero_rho_is_fedavg(small_spec):
    net = TinyNet(small_spec)
    w, wg = _active_weights(small_spec, 1), _active_weights(small_spec, 2)
    x, y = _batch(small_spec, 4, 0)
    prox = baseline_objective(Algorithm.FEDPROX, net, w, wg, x, y, rho=0.0)
    avg = baseline_objective(Algorithm.FEDAVG, net, w, wg, x, y, rho=0.0)
    assert prox[0] == avg[0] and prox[1].bit_equal(avg[1])


def test_proximal_gradient_is_rho_times_drift(small_spec):
    net = TinyNet(small_spec)
    w, wg = _active_weights(small_spec, 1), _active_weights(small_spec, 2)
    x, y = _batch(small_spec, 4, 0)
    losses, prox = baseline_objective(Algorithm.FEDPROX, net, w, wg, x, y, rho=0.3)
    _, avg = baseline_objective(Algorithm.FEDAVG, net, w, wg, x, y)
    drift = sum(float(np.sum((w[n].array - wg[n].array) ** 2)) for n in w)
    assert losses.l_prox == pytest.approx(drift, rel=1e-12)
    for n in w:
        expected = 0.3 * (w[n].array - wg[n].array)
        assert np.max(np.abs(prox[n].array - avg[n].array - expected)) < 1e-12


def test_fedprox_gradient_matches_finite_differences(tiny_spec):
    net = TinyNet(tiny_spec)
    w, wg = _active_weights(tiny_spec, 3), _active_weights(tiny_spec, 4)
    x, y = _batch(tiny_spec, 3, 1)
    _, analytic = baseline_objective(Algorithm.FEDPROX, net, w, wg, x, y, rho=0.2)
    numeric = finite_diff_grad(
        lambda ps: baseline_objective(Algorithm.FEDPROX, net, ps, wg, x, y, rho=0.2)[0].l_total, w)
    assert max_rel_err(analytic, numeric) < 1e-4


# ---------------------------------------------------------------------------
# Local training and aggregation
# ---------------------------------------------------------------------------

def test_zero_local_epochs_return_the_global_model(small_spec, make_center):
    client = make_client(make_center(), augment=False)
    wg = initial_global_model(small_spec, FLConfig(seed=1))
    update = party_local_training(client, wg, FLConfig(local_epochs=0, seed=1), small_spec, 0)
    assert update.weights.bit_equal(wg)
    assert update.n_samples == len(client.train)


def test_single_batch_epoch_is_one_sgd_step(small_spec, make_center):
    ds = make_center(n_per_class=2)
    client = make_client(ds, augment=False)
    cfg = FLConfig(algorithm=Algorithm.FEDAVG, batch=4, seed=2)
    wg = initial_global_model(small_spec, cfg)
    order = rng_for(cfg.seed, "client", ds.center_id, 0, 0).permutation(len(ds))
    _, grads = baseline_objective(Algorithm.FEDAVG, TinyNet(small_spec), wg, wg,
                                  ds.images[order], ds.labels[order])
    expected = sgd_step(wg, grads, cfg.lr)
    assert party_local_training(client, wg, cfg, small_spec, 0).weights.bit_equal(expected)


def test_augmented_clients_weigh_by_original_size(make_center):
    ds = make_center(n_per_class=3)
    client = make_client(ds)
    assert len(client.train) == 8 * len(ds)
    assert client.n_original == len(ds)


def test_empty_client_is_a_contract_error(small_spec):
    empty = CenterDataset(0, np.zeros((0, 3, 4, 4)), np.zeros(0, dtype=np.int64), 2)
    with pytest.raises(ContractError):
        party_local_training(make_client(empty), initial_global_model(small_spec, FLConfig()),
                             FLConfig(), small_spec, 0)


def _scalar_set(value):
    return ParamSet([("w", Tensor([value]))])


def test_aggregate_examples(random_paramset):
    w = random_paramset(0)
    assert aggregate([w], [7]).bit_equal(w)
    assert aggregate([w, w, w], [1, 2, 3]).bit_equal(w)
    assert aggregate([_scalar_set(1.0), _scalar_set(5.0)], [3, 1])["w"].array.tolist() == [2.0]


def test_aggregate_matches_loops(random_paramset):
    sets = [random_paramset(s) for s in range(5)]
    sizes = [3, 9, 1, 4, 6]
    out = aggregate(sets, sizes)
    total = sum(sizes)
    for name in sets[0]:
        expected = np.zeros(sets[0][name].shape)
        for ps, m in zip(sets, sizes):
            expected = expected + (m / total) * ps[name].array
        assert np.max(np.abs(out[name].array - expected)) < 1e-12


def test_aggregate_is_order_insensitive(random_paramset):
    sets = [random_paramset(s, scale=0.25) for s in range(3)]
    sizes = [2, 5, 3]
    a = aggregate(sets, sizes)
    b = aggregate(sets[::-1], sizes[::-1])
    for name in a:
        assert np.max(np.abs(a[name].array - b[name].array)) <= 1e-15


def test_aggregate_contracts(random_paramset):
    w = random_paramset(0)
    with pytest.raises(StructuralError):
        aggregate([], [])
    with pytest.raises(ContractError):
        aggregate([w, w], [1, 0])
    with pytest.raises(StructuralError):
        aggregate([w, random_paramset(0, shapes=(("a", (2, 3)),))], [1, 1])


# ---------------------------------------------------------------------------
# Server loop
# ---------------------------------------------------------------------------

@pytest.fixture
def clients(make_center):
    return [make_client(make_center(center_id=0, n_per_class=3, seed=0), augment=False),
            make_client(make_center(center_id=1, n_per_class=2, offset=0.2, seed=1), augment=False)]


def _cfg(**kw):
    base = dict(rounds=2, local_epochs=1, lr=0.01, batch=4, seed=11)
    base.update(kw)
    return FLConfig(**base)


def test_zero_rounds_return_the_initial_model(small_spec, clients):
    cfg = _cfg(rounds=0)
    result = run_federation(small_spec, clients, cfg)
    assert result.global_weights.bit_equal(initial_global_model(small_spec, cfg))
    assert len(result.history) == 0


def test_single_client_matches_centralized_sgd(small_spec, make_center):
    ds = make_center(n_per_class=3)
    cfg = _cfg(rounds=3, local_epochs=2, algorithm=Algorithm.FEDAVG, batch=2)
    result = run_federation(small_spec, [make_client(ds, augment=False)], cfg)

    net = TinyNet(small_spec)
    w = initial_global_model(small_spec, cfg)
    for r in range(3):
        for e in range(2):
            order = rng_for(cfg.seed, "client", ds.center_id, r, e).permutation(len(ds))
            for piece in batch_slices(len(ds), cfg.batch):
                idx = order[piece]
                g = CompGraph()
                nodes = net.bind(g, w)
                logits = net.classify(g, net.encode(g, g.const(ds.images[idx]), nodes), nodes)
                w = sgd_step(w, backward(g, ce_term(g, g.log_softmax(logits), ds.labels[idx])), cfg.lr)
    assert result.global_weights.bit_equal(w)


def test_runs_are_deterministic(small_spec, clients):
    a = run_federation(small_spec, clients, _cfg())
    b = run_federation(small_spec, clients, _cfg())
    assert a.history.checksums == b.history.checksums
    assert a.history.to_records() == b.history.to_records()
    assert [r["round"] for r in a.history.records] == [1, 2]


def test_reduction_chain_is_bitwise(small_spec, clients):
    runs = [run_federation(small_spec, clients, _cfg(rounds=5, algorithm=Algorithm.FL_BT, mu=0.0)),
            run_federation(small_spec, clients, _cfg(rounds=5, algorithm=Algorithm.FEDAVG)),
            run_federation(small_spec, clients, _cfg(rounds=5, algorithm=Algorithm.FEDPROX, rho=0.0))]
    assert runs[0].history.checksums == runs[1].history.checksums == runs[2].history.checksums


@pytest.mark.parametrize("algorithm", [Algorithm.FL_BT, Algorithm.FEDPROX])
def test_threaded_clients_match_serial(small_spec, clients, algorithm):
    serial = run_federation(small_spec, clients, _cfg(algorithm=algorithm))
    threaded = run_federation(small_spec, clients, _cfg(algorithm=algorithm, workers=2))
    assert serial.history.checksums == threaded.history.checksums


def test_augmented_views_are_deterministic(small_spec, clients):
    cfg = _cfg(bt_views=ViewMode.AUGMENTED)
    assert (run_federation(small_spec, clients, cfg).history.checksums
            == run_federation(small_spec, clients, cfg).history.checksums)


@pytest.mark.parametrize("workers", [1, 2])
def test_failing_client_aborts_the_round(small_spec, clients, workers):
    empty = CenterDataset(5, np.zeros((0, 3, 4, 4)), np.zeros(0, dtype=np.int64), 2)
    with pytest.raises(ClientError) as info:
        run_federation(small_spec, clients + [make_client(empty)], _cfg(workers=workers))
    assert info.value.center_id == 5
    assert isinstance(info.value.cause, ContractError)


def test_local_only_keeps_separate_models(small_spec, clients):
    cfg = _cfg(algorithm=Algorithm.LOCAL_ONLY)
    result = run_federation(small_spec, clients, cfg)
    assert result.global_weights.bit_equal(initial_global_model(small_spec, cfg))
    assert not result.client_weights[0].bit_equal(result.client_weights[1])


def test_aggregating_algorithms_deploy_the_global_model(small_spec, clients):
    result = run_federation(small_spec, clients, _cfg())
    assert all(w.bit_equal(result.global_weights) for w in result.client_weights.values())


def test_ssl_encoder_initializes_the_global_model(small_spec, clients):
    ssl = init_weights(small_spec, 99)
    result = run_federation(small_spec, clients, _cfg(rounds=0), ssl_weights=ssl)
    for name in result.global_weights:
        if name.startswith("encoder."):
            assert result.global_weights[name].bit_equal(ssl[name])


def test_ssl_init_checkpoint_path(small_spec, tmp_path):
    ssl = init_weights(small_spec, 99)
    path = tmp_path / "ssl.ps"
    ssl.save(path)
    w = initial_global_model(small_spec, _cfg(ssl_init=str(path)))
    assert w["encoder.0.weight"].bit_equal(ssl["encoder.0.weight"])


def test_evaluator_runs_on_schedule(small_spec, clients):
    calls = []

    def evaluator(center_id, weights):
        calls.append(center_id)
        return {"accuracy": 0.5}

    result = run_federation(small_spec, clients, _cfg(rounds=3, eval_every=2), evaluator=evaluator)
    assert calls == [0, 1]
    assert "eval" not in result.history.records[0]
    assert result.history.records[1]["eval"] == {"0": {"accuracy": 0.5}, "1": {"accuracy": 0.5}}


# ---------------------------------------------------------------------------
# FLConfig
# ---------------------------------------------------------------------------

def test_fl_config_validation_locations():
    problems = FLConfig(lr=0.0, batch=1, mu=0.01).validate()
    locations = {p.location for p in problems}
    assert {"fl.lr", "fl.batch"} <= locations
    with pytest.raises(ConfigError):
        FLConfig(lr=0.0).require_valid()
    assert FLConfig(batch=1, mu=0.0).validate() == []


def test_fl_config_json_round_trip():
    cfg = FLConfig(rounds=7, algorithm=Algorithm.FEDPROX, bt_views=ViewMode.AUGMENTED, rho=0.2)
    assert FLConfig.from_json(cfg.to_json()) == cfg


# ---------------------------------------------------------------------------
# Desk-scale experiments (slow)
# ---------------------------------------------------------------------------

def _desk_config(master_seed=0):
    config = ExperimentConfig.load_json(os.path.join(PROJECT_ROOT, "configs", "desk_scale.json"))
    return dataclasses.replace(config, master_seed=master_seed)


def _desk_centers(config):
    return [generate_center_dataset(spec, config.seed("data", spec.center_id)) for spec in config.center_specs()]


@pytest.mark.slow
def test_federated_averaging_is_no_worse_than_local_training():
    medians = {}
    for algorithm in (Algorithm.FEDAVG, Algorithm.LOCAL_ONLY):
        accuracies = []
        for master_seed in range(5):
            config = _desk_config(master_seed)
            report = cross_validate(_desk_centers(config), config.model, config.fl_config(algorithm),
                                    k=config.eval.k_folds, seed=config.seed("cv"))
            accuracies.append(report.summary["gta"]["accuracy"][0])
        medians[algorithm] = float(np.median(accuracies))
    assert medians[Algorithm.FEDAVG] >= medians[Algorithm.LOCAL_ONLY], f"median GTA accuracy {medians}"


@pytest.mark.slow
def test_stain_shift_degrades_a_single_center_model():
    config = _desk_config()
    home = _desk_centers(config)[-1]
    shifted_spec = dataclasses.replace(config.center_specs()[-1], center_id=9,
                                       stain_matrix=((0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)),
                                       stain_offset=(0.2, -0.1, 0.1))
    away = generate_center_dataset(shifted_spec, config.seed("data", 9))
    split = kfold_split(home, config.eval.k_folds, config.seed("kfold"))[0]
    cfg = config.fl_config(Algorithm.FEDAVG)
    result = run_federation(config.model, [make_client(home.subset(split.train))], cfg)
    same = evaluate_model(result.global_weights, home.subset(split.test), config.model)[0].accuracy
    cross = evaluate_model(result.global_weights, away, config.model)[0].accuracy
    assert cross < same, f"same-center accuracy {same:.3f}, shifted-center accuracy {cross:.3f}"
