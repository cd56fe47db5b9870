"""The nine acceptance criteria, each at its stated tolerance.

A summary line per criterion is printed at the end of the pytest run.
"""

import json
import math
import time

import numpy as np
import pytest

from fedgraph.cli import main
from fedgraph.features import conv_trace, ConvPipelineWeights
from fedgraph.federation import INIT_STREAM, ClientState, FederationConfig, fedavg, partition_noniid, run_training
from fedgraph.gnn import ModelConfig, ModelWeights, backward, forward, init_weights, layer_forward, train_batch
from fedgraph.graphs import CorrConfig, GraphSample, corr_db, corr_knn, corr_pcc, corr_plv
from fedgraph.numerics import AdamState, RngStream
from fedgraph.signal_ingest import ElectrodePositions
from oracles import fd_gradient, gradient_case, literal_mean_layer, max_relative_error, random_graph
from test_features import SHAPE_ROWS
from test_federation import labelled_graphs


@pytest.mark.acceptance(1, "analytic gradients match central differences on 50 graphs")
def test_gradient_oracle(measured):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        g, ws, cfg = gradient_case(seed)
        _, _, cache = forward(g, ws, cfg, training=True, rng=RngStream(seed, 99))
        analytic = backward(cache, g, ws).flatten()
        worst = max(worst, max_relative_error(analytic, fd_gradient(g, ws, cfg, seed)))
    elapsed = time.perf_counter() - start
    measured.update(max_rel_err=f"{worst:.2e}", seconds=f"{elapsed:.1f}")
    assert worst < 1e-4
    assert elapsed < 30.0


@pytest.mark.acceptance(2, "mean aggregation layer equals the literal formula on 100 cases")
def test_literal_layer_oracle(measured):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n, d, out = (int(v) for v in rng.integers([1, 1, 1], [10, 9, 9]))
        g = random_graph(rng, n, d, binary=True, density=float(rng.uniform(0.1, 0.9)))
        w = rng.normal(size=(out, d))
        got, _ = layer_forward(g.x, g.a, w)
        worst = max(worst, float(np.max(np.abs(got - literal_mean_layer(g.x, g.a, w)))))
    measured["max_abs_err"] = f"{worst:.1e}"
    assert worst <= 1e-12


def _valid(a):
    return (
        np.array_equal(a, a.T)
        and np.all(np.diag(a) == 0.0)
        and np.all(a >= 0.0)
        and np.all(a <= 1.0)
        and np.all(np.isfinite(a))
    )


@pytest.mark.acceptance(3, "correlation examples and adjacency invariants")
def test_correlation_oracles(measured):
    pcc = corr_pcc([[1, 2, 3], [1, 1, 2]])[0, 1]
    k = np.arange(8)
    plv = corr_plv([np.cos(2 * np.pi * k / 8), np.cos(2 * np.pi * k / 8 + np.pi / 4)])[0, 1]
    measured.update(pcc=f"{pcc:.12f}", plv=f"{plv:.12f}")
    assert abs(pcc - math.sqrt(3) / 2) <= 1e-9
    assert abs(plv - 1.0) <= 1e-6

    rng = np.random.default_rng(3)
    bad = {"DB": 0, "KNN": 0, "PCC": 0, "PLV": 0}
    for _ in range(200):
        n = int(rng.integers(2, 12))
        x = rng.normal(size=(n, int(rng.integers(4, 24)))) * rng.uniform(0.1, 10)
        pos = ElectrodePositions([f"e{i}" for i in range(n)], rng.normal(size=(n, 3)))
        bad["DB"] += not _valid(corr_db(pos))
        bad["KNN"] += not _valid(corr_knn(x, CorrConfig(kind="KNN", k=int(rng.integers(1, n)))))
        bad["PCC"] += not _valid(corr_pcc(x))
        bad["PLV"] += not _valid(corr_plv(x))
    measured["invalid"] = sum(bad.values())
    assert bad == {"DB": 0, "KNN": 0, "PCC": 0, "PLV": 0}


@pytest.mark.acceptance(4, "FedAvg algebra and single-client equivalence")
def test_fedavg_algebra(measured):
    cfg = ModelConfig(in_dim=6, hidden_dim=8)
    models = [init_weights(cfg, RngStream(40, i)) for i in range(6)]
    for m in models:
        for n in (1, 2, 5, 9):
            assert fedavg([m.copy() for _ in range(n)]).flatten().tobytes() == m.flatten().tobytes()
    worst = 0.0
    for a, b in ((2.0, -1.0), (0.3, 0.7), (-5.5, 1e3)):
        combo = [ModelWeights.unflatten(a * p.flatten() + b * q.flatten(), p.shapes) for p, q in zip(models, models[::-1])]
        expected = a * fedavg(models).flatten() + b * fedavg(models[::-1]).flatten()
        worst = max(worst, float(np.max(np.abs(fedavg(combo).flatten() - expected))))
    measured["linearity_err"] = f"{worst:.1e}"
    assert worst <= 1e-12

    data = labelled_graphs(8)
    fed = FederationConfig(n_clients=1, n_partitions=3, partitions_per_client=3, epochs=3)
    res = run_training(data, "federated", fed, cfg, seed=4)
    train = [data[i] for i in res.client_indices[0]]
    w = init_weights(cfg, RngStream(4, INIT_STREAM))
    client = ClientState(0, train, w.copy(), AdamState.zeros(w.n_params, lr=0.015), RngStream(4, 0), 8)
    opt = client.opt
    for _ in range(res.rounds):
        w, opt, _ = train_batch(w, client.next_batch(), opt, client.rng, cfg)
    assert res.weights.flatten().tobytes() == w.flatten().tobytes()


@pytest.mark.acceptance(5, "non-IID partition over 100 seeds: disjoint cover, at most 3 labels per client")
def test_partitioner(measured):
    worst = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        per_class = 3 * int(rng.integers(1, 12))
        labels = np.repeat(np.arange(5), per_class)[rng.permutation(5 * per_class)]
        plan = partition_noniid(labels, 5, 15, 3, RngStream(seed))
        held = [plan.client_indices(c) for c in range(5)]
        joined = np.concatenate(held)
        assert joined.size == labels.size and np.array_equal(np.sort(joined), np.arange(labels.size))
        worst = max(worst, max(len(set(labels[h])) for h in held))
    measured["max_labels_per_client"] = worst
    assert worst <= 3


@pytest.mark.acceptance(6, "feature extractor shape chain ends at width 256")
def test_shape_chain(measured):
    out, trace = conv_trace(RngStream(6).normal(size=3000), ConvPipelineWeights.random(RngStream(6)))
    measured["rows"] = len(trace)
    assert trace == SHAPE_ROWS
    assert out.shape == (256,)


@pytest.mark.acceptance(8, "node relabelling leaves loss and prediction unchanged on 100 graphs")
def test_permutation_invariance(measured):
    rng = np.random.default_rng(8)
    worst = 0.0
    for seed in range(100):
        n, d = int(rng.integers(2, 12)), int(rng.integers(2, 16))
        cfg = ModelConfig(in_dim=d, n_layers=int(rng.integers(1, 4)), hidden_dim=int(rng.integers(2, 16)))
        ws = init_weights(cfg, RngStream(seed, 8))
        g = random_graph(rng, n, d, binary=bool(rng.integers(2)))
        p = rng.permutation(n)
        gp = GraphSample(g.x[p], g.a[np.ix_(p, p)], g.y)
        z1, l1, _ = forward(g, ws, cfg)
        z2, l2, _ = forward(gp, ws, cfg)
        assert int(np.argmax(z1)) == int(np.argmax(z2))
        worst = max(worst, abs(l1 - l2), float(np.max(np.abs(z1 - z2))))
    measured["max_diff"] = f"{worst:.1e}"
    assert worst <= 1e-9


@pytest.fixture(scope="module")
def synthetic_graphs(tmp_path_factory):
    """gen-synthetic with defaults, stat features, PLV graphs."""
    out = tmp_path_factory.mktemp("e2e")
    start = time.perf_counter()
    for cmd in ("gen-synthetic", "extract", "build-graphs"):
        assert main([cmd, "--seed", "7", "--set", f"paths.output_dir={json.dumps(str(out))}"]) == 0
    return out, time.perf_counter() - start


def _train(base, run_dir, workers):
    run_dir.mkdir()
    (run_dir / "graphs.gds").write_bytes((base / "graphs.gds").read_bytes())
    start = time.perf_counter()
    code = main(["train", "--mode", "federated", "--seed", "7", "--workers", str(workers),
                 "--set", f"paths.output_dir={json.dumps(str(run_dir))}"])
    assert code == 0
    files = tuple((run_dir / "federated" / n).read_bytes() for n in ("metrics.json", "losses.csv"))
    return files, time.perf_counter() - start


@pytest.mark.slow
@pytest.mark.acceptance(7, "synthetic end-to-end federated run reaches macro F1 >= 0.9")
def test_end_to_end(synthetic_graphs, tmp_path, measured):
    base, prep = synthetic_graphs
    first, t1 = _train(base, tmp_path / "a", 1)
    second, _ = _train(base, tmp_path / "b", 1)
    doc = json.loads(first[0])
    f1 = doc["final"]["macro_f1"]
    measured.update(macro_f1=f"{f1:.4f}", rounds=doc["rounds"], seconds=f"{prep + t1:.1f}")
    assert doc["corr_kind"] == "PLV" and doc["n_test_samples"] == 125
    assert f1 >= 0.9
    assert first == second
    assert prep + t1 < 300.0


@pytest.mark.slow
@pytest.mark.acceptance(9, "metrics.json and losses.csv identical across --workers values")
def test_artifacts_across_workers(synthetic_graphs, tmp_path, measured):
    base, _ = synthetic_graphs
    serial, _ = _train(base, tmp_path / "w1", 1)
    parallel, _ = _train(base, tmp_path / "w4", 4)
    measured["workers"] = "1 vs 4"
    assert serial == parallel
