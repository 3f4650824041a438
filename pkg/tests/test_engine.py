import numpy as np
import pytest

from _oracles import decay_ratio, max_disagreement_after_one_step, run_states, single_worker_sgd
from gossipsim.config import parse_config
from gossipsim.engine import (
    Simulation,
    Strategy,
    StrategyKind,
    UpdateOrder,
    consensus_mean,
    degree_schedule,
    gossip,
    initial_state,
    local_update,
    message_volume,
    sync_step,
    topology_for,
    total_message_volume,
)
from gossipsim.errors import ConfigError, DivergenceError
from gossipsim.model import ModelSpec, init_params
from gossipsim.schedules import AdaParams
from gossipsim.topology import build_topology, mixing_matrix, spectral_report

ALL = ["C_complete", "D_complete", "D_ring", "D_torus", "D_exponential", "Ada"]


def small(**kw):
    base = dict(
        n_workers=4,
        epochs=2,
        batch_size=8,
        dataset=dict(n_samples=200, input_dim=4, n_classes=3),
        schedule=dict(kind="constant", base_lr=0.2),
        k0=1,
        gamma_k=0.5,
        k_min=1,
    )
    base.update(kw)
    return parse_config(base)


def mix_of(kind, n, k=None):
    return mixing_matrix(build_topology(kind, n, k=k))


@pytest.mark.parametrize("kind,k", [("ring", None), ("torus", None), ("exponential", None), ("ring_lattice", 3)])
def test_gossip_matches_dense_product(kind, k):
    mix = mix_of(kind, 12, k)
    x = np.random.default_rng(0).normal(size=(12, 7))
    np.testing.assert_allclose(gossip(x, mix), mix.weights @ x, rtol=0, atol=1e-13)


def test_gossip_pair_midpoint():
    mix = mix_of("complete", 2)
    out = gossip(np.array([[0.0], [2.0]]), mix)
    np.testing.assert_array_equal(out, [[1.0], [1.0]])


def test_gossip_keeps_equal_rows_bit_identical():
    x = np.tile(np.random.default_rng(1).normal(size=9), (16, 1))
    for kind in ("ring", "torus", "exponential", "complete"):
        np.testing.assert_array_equal(gossip(x, mix_of(kind, 16)), x)


def test_gossip_shape_mismatch():
    with pytest.raises(ValueError):
        gossip(np.zeros((3, 2)), mix_of("complete", 4))


def test_consensus_mean_exact_for_equal_rows():
    row = np.random.default_rng(2).normal(size=5)
    np.testing.assert_array_equal(consensus_mean(np.tile(row, (7, 1))), row)


def test_complete_average_then_gradient_zero_grads_gives_mean():
    x = np.random.default_rng(3).normal(size=(5, 4))
    s = Strategy("D_complete", UpdateOrder.AVERAGE_THEN_GRADIENT)
    new, _ = local_update(x, s, mix_of("complete", 5), np.zeros_like(x), 0.1)
    np.testing.assert_allclose(new, np.tile(x.mean(axis=0), (5, 1)), atol=1e-15)


@pytest.mark.parametrize("kind,k", [("ring", None), ("torus", None), ("exponential", None), ("ring_lattice", 4), ("complete", None)])
def test_consensus_decay_bounded_by_slem(kind, k):
    mix = mix_of(kind, 16, k)
    slem = spectral_report(mix).second_eigenvalue_modulus
    if kind == "complete":
        assert max_disagreement_after_one_step(mix, 16) < 1e-12
    else:
        ratio = decay_ratio(mix, 16)
        assert ratio <= slem + 0.02
        assert ratio >= slem - 0.05


@pytest.mark.parametrize("kind", ["ring", "torus", "exponential", "complete"])
@pytest.mark.parametrize("order", list(UpdateOrder))
def test_mean_conserved_under_zero_gradient(kind, order):
    strategy = Strategy(
        {"ring": "D_ring", "torus": "D_torus", "exponential": "D_exponential", "complete": "D_complete"}[kind], order
    )
    mix = mix_of(kind, 16)
    x = np.random.default_rng(4).normal(size=(16, 6))
    mean = x.mean(axis=0)
    state = initial_state(init_params(ModelSpec("linear", 2, 2, bias=False)), 16)
    state = type(state)(x, state.segments)
    for _ in range(25):
        state = sync_step(state, strategy, mix, np.zeros_like(x), 0.5)
        assert np.max(np.abs(state.params.mean(axis=0) - mean)) <= 1e-12


def test_order_equivalence_on_complete_graph():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 4))
    g = np.tile(rng.normal(size=4), (6, 1))
    mix = mix_of("complete", 6)
    a, _ = local_update(x, Strategy("D_complete", UpdateOrder.GRADIENT_THEN_AVERAGE), mix, g, 0.3)
    b, _ = local_update(x, Strategy("D_complete", UpdateOrder.AVERAGE_THEN_GRADIENT), mix, g, 0.3)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


def test_sync_step_reports_divergence():
    state = initial_state(init_params(ModelSpec("linear", 1, 2, bias=False)), 3)
    g = np.full((3, 2), np.inf)
    with pytest.raises(DivergenceError) as err:
        sync_step(state, Strategy("D_ring"), mix_of("ring", 3), g, 0.1)
    assert err.value.iteration == 1 and err.value.strategy == "D_ring"


def test_centralized_replicas_stay_bit_identical():
    states = []
    sim = Simulation(small(strategy="C_complete", n_workers=6, heterogeneity=0.9, epochs=3))
    for rec in sim.records(on_state=states.append):
        assert all(t.gini == 0.0 for t in rec.tensors)
    for s in states:
        assert all(np.array_equal(s.params[0], row) for row in s.params)


def test_d_complete_bit_identical_to_c_complete_on_identical_shards():
    kw = dict(n_workers=5, data_mode="replicated", epochs=5, batch_size=8, heterogeneity=0.0)
    c = run_states(small(strategy="C_complete", **kw))
    d = run_states(small(strategy="D_complete", **kw))
    assert len(c) == len(d) >= 100
    for a, b in zip(c, d):
        assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("strategy", ALL)
def test_single_worker_matches_plain_sgd(strategy):
    cfg = small(strategy=strategy, n_workers=1, heterogeneity=0.3, schedule=dict(kind="constant", base_lr=0.2, scaling="linear"))
    ref = single_worker_sgd(cfg)
    got = [s[0] for s in run_states(cfg)]
    assert len(got) == len(ref)
    for a, b in zip(got, ref):
        assert a.tobytes() == b.tobytes()


def test_ada_first_epoch_matches_d_complete():
    kw = dict(n_workers=9, epochs=2, heterogeneity=0.5, dataset=dict(n_samples=360, input_dim=4, n_classes=3))
    ada = small(strategy="Ada", k0=4, gamma_k=1.0, **kw)
    dc = small(strategy="D_complete", **kw)
    steps = ada.steps_per_epoch()
    a, d = run_states(ada), run_states(dc)
    for i in range(steps):
        assert a[i].tobytes() == d[i].tobytes()
    assert a[steps].tobytes() != d[steps].tobytes()


@pytest.mark.parametrize("strategy", ALL)
def test_separable_data_reaches_full_train_accuracy(strategy):
    cfg = parse_config(
        dict(
            strategy=strategy,
            n_workers=9 if strategy == "D_torus" else 8,
            k0=3,
            gamma_k=0.1,
            epochs=10,
            batch_size=8,
            heterogeneity=0.5,
            dataset=dict(n_samples=400, input_dim=4, n_classes=4, cluster_spread=0.1),
            schedule=dict(kind="constant", base_lr=0.5),
        )
    )
    _, res = Simulation(cfg).run()
    assert res.epochs_to_accuracy(1.0, split="train") is not None


@pytest.mark.parametrize("parallelism", [2, 4])
def test_records_independent_of_parallelism(parallelism):
    cfg = small(strategy="D_ring", n_workers=6, heterogeneity=0.7)
    a, _ = Simulation(cfg, parallelism=1).run()
    b, _ = Simulation(cfg, parallelism=parallelism).run()
    assert a == b


def test_metrics_record_shape():
    recs, res = Simulation(small(strategy="D_torus", n_workers=9, dataset=dict(n_samples=450, input_dim=4, n_classes=3))).run()
    steps = 360 // 9 // 8
    assert [r.iteration for r in recs] == list(range(1, 2 * steps + 1))
    assert [r.test_accuracy is not None for r in recs] == ([False] * (steps - 1) + [True]) * 2
    assert res.iterations == 2 * steps
    assert len(res.epoch_test_accuracy) == 2


def test_divergence_carries_provenance():
    cfg = small(strategy="D_ring", n_workers=3, schedule=dict(kind="constant", base_lr=1e300))
    sim = Simulation(cfg)
    with pytest.raises(DivergenceError) as err:
        sim.run()
    assert err.value.strategy == "D_ring" and err.value.epoch == 0
    assert sim.result.diverged


def test_topology_for_ada_and_fallback():
    s = Strategy("Ada", ada=AdaParams(4, 1.0))
    assert topology_for(s, 9, 0).k == 4
    assert topology_for(s, 9, 3).k == 2
    assert topology_for(Strategy("D_ring"), 2).kind.value == "complete"


def test_message_volume_examples():
    assert message_volume([2] * 10, 1, 100) == 2000
    assert message_volume([8, 6, 4], 1, 10) == 180
    assert message_volume([8], 1, 10) == 80
    assert message_volume([15], 3, 10, centralized=True, n_workers=16) == pytest.approx(3 * 2 * 10 * 15 / 16)


def test_ada_degree_schedule_and_volume_below_complete():
    s = Strategy("Ada", ada=AdaParams(4, 1.0))
    assert degree_schedule(s, 16, 3) == [8, 6, 4]
    ada = small(strategy="Ada", n_workers=16, k0=7, gamma_k=0.5, k_min=2, dataset=dict(n_samples=800, input_dim=4, n_classes=3))
    dc = small(strategy="D_complete", n_workers=16, dataset=dict(n_samples=800, input_dim=4, n_classes=3))
    assert total_message_volume(ada) < total_message_volume(dc)


def test_run_accumulates_same_volume_as_closed_form():
    for strategy in ALL:
        cfg = small(strategy=strategy, n_workers=9, dataset=dict(n_samples=450, input_dim=4, n_classes=3), k0=4, gamma_k=1.0)
        _, res = Simulation(cfg).run()
        assert res.message_volume == total_message_volume(cfg)


def test_strategy_parsing():
    assert StrategyKind.parse("decentralized", "torus") is StrategyKind.DECENTRALIZED_TORUS
    assert StrategyKind.parse("centralized") is StrategyKind.CENTRALIZED_COMPLETE
    assert StrategyKind.parse("adaptive") is StrategyKind.DECENTRALIZED_ADAPTIVE
    assert StrategyKind.parse("decentralized_exponential") is StrategyKind.DECENTRALIZED_EXPONENTIAL
    with pytest.raises(ConfigError):
        StrategyKind.parse("centralized", "ring")
    with pytest.raises(ConfigError):
        StrategyKind.parse("D_ring", "torus")
    with pytest.raises(ConfigError):
        StrategyKind.parse("gossip")


def test_strategy_ada_presence():
    with pytest.raises(ConfigError):
        Strategy("Ada")
    with pytest.raises(ConfigError):
        Strategy("D_ring", ada=AdaParams(3, 0.1))
