"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``criterion N PASS/FAIL`` line (also collected into the
pytest terminal summary) and then asserts. Criteria 1 and 7 train real
networks and take several minutes; the rest finish in seconds.
"""

import csv
import time
from pathlib import Path

import numpy as np
import pytest

from _oracles import gradcheck_topology, gradient_check, residual_pair, spearman
from netadjust.adjuster import AdjusterConfig, run
from netadjust.cli import _train_seed, main
from netadjust.fur_probe import build_probe_plan, estimate_fur, spatial_dropout_mask
from netadjust.mini_engine import CNNEvaluator, ConvNet, SyntheticDatasetSpec
from netadjust.zoo import toy_net

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def trace(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.slow
def test_flops_conserved_on_resnet20(tmp_path, verdict):
    out = tmp_path / "r20"
    start = time.perf_counter()
    code = main(["adjust", "--config", str(CONFIGS / "resnet20_cnn.yaml"), "-q", "--out-dir", str(out)])
    minutes = (time.perf_counter() - start) / 60
    rows = trace(out / "trace.csv")
    f0 = int(rows[0]["flops"])
    worst = max(abs(int(r["flops"]) - f0) / f0 for r in rows)
    ok = code == 0 and len(rows) == 11 and worst <= 0.01 and minutes < 30
    verdict(1, "FLOPs conservation, ResNet-20, 10 iterations", ok,
            f"max deviation {worst:.2%}, {len(rows)} records, {minutes:.1f} min")
    assert ok


def test_adjuster_reaches_oracle_optimum(tmp_path, verdict):
    start = time.perf_counter()
    cfg = str(CONFIGS / "toy_surrogate.yaml")
    assert main(["adjust", "--config", cfg, "-q", "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["oracle", "--config", cfg, "-q", "--out-dir", str(tmp_path / "o")]) == 0
    seconds = time.perf_counter() - start
    best = max(float(r["accuracy"]) for r in trace(tmp_path / "a" / "trace.csv"))
    optimum = float(trace(tmp_path / "o" / "oracle.csv")[0]["accuracy"])
    gap = optimum - best
    ok = gap <= 0.01 and seconds < 300
    verdict(2, "oracle optimality on the toy surrogate", ok,
            f"adjuster {best:.4f} vs optimum {optimum:.4f}, gap {gap:.4f}, {seconds:.1f} s")
    assert ok


def test_probe_ranks_match_finite_differences(toy4, toy_surrogate, verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    rhos = []
    for _ in range(20):
        cfg = toy4.default_config().with_channels(rng.integers(4, 65, 4))
        report = estimate_fur(toy_surrogate, toy_surrogate.train(toy4, cfg),
                              build_probe_plan(toy4, cfg))
        rhos.append(spearman([e.fur for e in report.entries], toy_surrogate.finite_difference_fur(cfg)))
    seconds = time.perf_counter() - start
    ok = min(rhos) >= 0.9 and seconds < 60
    verdict(3, "FUR probe ranking fidelity", ok,
            f"min Spearman {min(rhos):.3f} over 20 configs, {seconds:.1f} s")
    assert ok


def test_gradients(verdict):
    topo = gradcheck_topology()
    net = ConvNet(topo, topo.default_config(), rng=np.random.default_rng(1))
    rng = np.random.default_rng(2)
    worst = gradient_check(net, rng.standard_normal((4, 3, 6, 6)), np.array([0, 1, 2, 1]), per_kind=100)
    kind, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < 1e-4
    verdict(4, "gradient check", ok, f"worst relative error {err:.1e} ({kind}), {len(worst)} kinds")
    assert ok


def test_zero_padding_equivalence(verdict):
    padded, split = residual_pair()
    x = np.random.default_rng(3).standard_normal((100, 3, 8, 8))
    diff = float(np.abs(padded.forward(x) - split.forward(x)).max())
    ok = diff <= 1e-6
    verdict(5, "zero-padded residual equals rewritten graph", ok, f"max abs difference {diff:.1e}")
    assert ok


def test_spatial_dropout_invariants(verdict):
    rng = np.random.default_rng(4)
    identity = np.array_equal(spatial_dropout_mask(64, 0.0, rng), np.ones(64))
    mean = float(spatial_dropout_mask(100_000, 0.3, rng).mean())
    survivors = set(np.unique(spatial_dropout_mask(1000, 0.1, rng)).tolist()) - {0.0}
    ok = identity and abs(mean - 1) <= 0.01 and survivors == {10 / 9}
    verdict(6, "SpatialDropout invariants", ok,
            f"p=0 identity {identity}, mask mean {mean:.4f}, survivor values {sorted(survivors)}")
    assert ok


@pytest.mark.slow
def test_adjusted_config_is_not_worse(verdict):
    topo = toy_net(channels=(8,) * 4, num_classes=10)
    start_cfg = topo.default_config()
    ev = CNNEvaluator(SyntheticDatasetSpec(num_classes=10, samples_per_class=100, noise_level=1.5),
                      epochs=8, batch_size=16)
    initial, final = [], []
    for seed in range(5):
        tr = run(topo, start_cfg, ev, AdjusterConfig(adjusted_layers=1, max_iterations=6, mc_samples=4,
                                                     seed=seed, probe_final=False))
        train_seed = _train_seed(seed, "final")
        initial.append(ev.evaluate(ev.train(topo, start_cfg, 20, seed=train_seed), "test"))
        final.append(ev.evaluate(ev.train(topo, tr.best_config, 20, seed=train_seed), "test"))
    a0, a1 = float(np.median(initial)), float(np.median(final))
    ok = a1 >= a0
    verdict(7, "non-inferiority over 5 seeds", ok,
            f"median test accuracy initial {a0:.4f}, adjusted {a1:.4f}")
    assert ok


def test_fur_spread_shrinks(toy4, toy_surrogate, verdict):
    tr = run(toy4, None, toy_surrogate, AdjusterConfig(adjusted_layers=2, max_iterations=15, mc_samples=1))
    first, last = tr.records[1].fur.spread(), tr.records[-1].fur.spread()
    ok = last <= first
    verdict(8, "FUR spread converges", ok, f"iteration 1 {first:.3e}, final {last:.3e}")
    assert ok


def test_trace_is_byte_identical(tmp_path, verdict):
    cfg = str(CONFIGS / "toy_cnn.yaml")
    for name in ("a", "b"):
        assert main(["adjust", "--config", cfg, "-q", "--out-dir", str(tmp_path / name)]) == 0
    same = (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()
    verdict(9, "deterministic trace.csv", same, "two runs of the toy CNN config, same seed")
    assert same
