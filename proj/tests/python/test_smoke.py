import itertools
import json
import os
import tempfile

import numpy as np
import pytest

import chprune


def fixture(c=6, f=4, k=3, n=300, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c * k * k))
    w = rng.normal(size=(f, c, k, k))
    return x, w


def test_hessian_matches_numpy():
    x, _ = fixture()
    h = chprune.compute_hessian(x, 6, 3)
    np.testing.assert_allclose(h, x.T @ x / len(x), rtol=1e-12, atol=1e-12)


def test_direct_error_is_twice_taylor():
    x, w = fixture()
    h = chprune.compute_hessian(x, 6, 3)
    mask = [1, 0, 1, 1, 0, 1]
    bias = np.linspace(-1, 1, 4)
    t = chprune.taylor_error(h, w, mask)
    d = chprune.direct_error(x, w, bias, mask)
    assert d == pytest.approx(2 * t, rel=1e-10)
    assert chprune.taylor_error(h, w, [1] * 6) == 0.0


def test_evolve_finds_exhaustive_optimum():
    x, w = fixture(c=8, seed=3)
    h = chprune.compute_hessian(x, 8, 3)
    best = min(
        chprune.taylor_error(h, w, [int(i in keep) for i in range(8)])
        for keep in itertools.combinations(range(8), 4)
    )
    r = chprune.evolve(h, w, 0.5, population=20, max_iterations=100, seed=1)
    assert sum(r["mask"]) == 4 == r["kept"]
    assert r["error"] == pytest.approx(best, rel=1e-9)
    assert len(r["log"]) == 100
    again = chprune.evolve(h, w, 0.5, population=20, max_iterations=100, seed=1)
    assert again["mask"] == r["mask"]


def test_mask_hex_round_trip():
    mask = [1, 0, 1, 1, 0, 0, 0, 1, 1]
    assert chprune.mask_hex(mask) == "b18"
    assert chprune.mask_from_hex("b18", 9) == mask
    with pytest.raises(chprune.ShapeError):
        chprune.mask_hex([2])


def test_population_fitness():
    assert chprune.population_fitness([1.0, 3.0]) == pytest.approx([2.02, 0.02])
    assert chprune.population_fitness([2.0, 2.0]) == [1.0, 1.0]


def test_network_surgery_and_stats():
    net = chprune.make_architecture("vgg16", 10, [3, 32, 32], seed=0)
    s = net.stats()
    assert abs(s.params - 14.7e6) <= 0.02 * 14.7e6
    assert abs(s.flops - 6.26e8) <= 0.02 * 6.26e8
    assert net.prunable_layers()[0] == "conv1"

    small = chprune.make_architecture("small-cnn", 3, [1, 8, 8], seed=2)
    x = np.random.default_rng(1).normal(size=(2, 1, 8, 8))
    assert small.forward(x).shape == (2, 3)
    consumer = small.consumer_of("conv2")
    c = small.param(consumer).shape[1]
    pruned = small.surgery(consumer, [1, 0] * (c // 2))
    assert pruned.stats().params < small.stats().params
    assert pruned.param(consumer).shape[1] == c // 2


def test_attention():
    feat = np.stack([np.arange(4.0).reshape(2, 2)] * 3)
    np.testing.assert_allclose(chprune.attention_map(feat), np.arange(4.0).reshape(2, 2))
    assert chprune.attention_distance([1.0, 0.0], [0.0, 1.0]) == pytest.approx(np.sqrt(2))


def test_config_errors_and_run():
    with pytest.raises(chprune.ConfigError):
        chprune.parse_config({"command": "stats"})
    with pytest.raises(chprune.ConfigError):
        chprune.parse_config({"command": "stats", "seed": 1, "ga": {"mutation_prob": 2}})
    base = os.environ.get("CHPRUNE_TMP") or tempfile.gettempdir()
    os.makedirs(base, exist_ok=True)
    out = tempfile.mkdtemp(dir=base)
    summary = chprune.run({"command": "stats", "seed": 1, "output_dir": out})
    stats = json.load(open(os.path.join(out, "stats.json")))
    assert stats["params"] > 0
    assert isinstance(summary, dict)
