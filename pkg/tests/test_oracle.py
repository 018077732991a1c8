import json
import math

import numpy as np
import pytest

from parsec.distribution import ArchDistribution
from parsec.oracle import (
    Landscape,
    PairedComparison,
    all_indices,
    estimator_audit,
    exact_grad_pi,
    exact_log_marginal,
    planted_recovery,
    posterior,
    random_baseline,
)
from parsec.space import SpaceConfig, SpaceError, enumerate_space
from parsec.trainer import TrainerConfig

from oracles import central_difference, rel_error

TOY = SpaceConfig(1, 2, "toy")


def random_dist(seed, scale=1.0, cfg=TOY):
    n = ArchDistribution(cfg).logits.size
    return ArchDistribution(cfg, np.random.default_rng(seed).normal(scale=scale, size=n))


def brute_log_marginal(land, dist):
    # independent path: ArchSample objects and per-sample log_prob
    terms = [land.log_lik(s) + dist.log_prob(s) for s in enumerate_space(land.config)]
    m = max(terms)
    return m + math.log(sum(math.exp(t - m) for t in terms))


def test_enumeration_order_matches_space_module():
    idx = all_indices(TOY)
    assert [tuple(r) for r in idx] == [s.category_indices(2) for s in enumerate_space(TOY)]
    with pytest.raises(SpaceError):
        all_indices(SpaceConfig(4, 7))


def test_constant_landscape():
    land = Landscape.constant(TOY, -3.25)
    for seed in range(3):
        d = random_dist(seed)
        assert exact_log_marginal(land, d) == pytest.approx(-3.25, abs=1e-12)
        np.testing.assert_allclose(exact_grad_pi(land, d), 0, atol=1e-12)


def test_uniform_marginal_is_log_mean_likelihood():
    table = np.random.default_rng(0).normal(size=256)
    land = Landscape(TOY, table=table)
    assert exact_log_marginal(land, ArchDistribution.uniform(TOY)) == pytest.approx(
        math.log(np.mean(np.exp(table))), rel=1e-12)


def test_degenerate_distribution_gives_mode_value():
    land = Landscape(TOY, table=np.random.default_rng(1).normal(size=256))
    d = ArchDistribution.uniform(TOY)
    target = np.array([1, 3, 0, 2])
    d.logits[d.offsets[:-1] + target] = 1000
    assert exact_log_marginal(land, d) == pytest.approx(land.log_lik_indices(target)[0], abs=1e-9)


def test_marginal_matches_brute_force():
    land = Landscape.planted(TOY, np.random.default_rng(2), tau=1.5)
    d = random_dist(3)
    assert exact_log_marginal(land, d) == pytest.approx(brute_log_marginal(land, d), rel=1e-12)


def test_exact_gradient_matches_finite_differences():
    land = Landscape(TOY, table=np.random.default_rng(4).normal(scale=2, size=256))
    for seed in range(5):
        d = random_dist(seed)
        (fd,) = central_difference(lambda: exact_log_marginal(land, d), [d.logits], h=1e-6)
        assert rel_error(exact_grad_pi(land, d), fd) < 1e-6


def test_posterior_sums_to_one():
    land = Landscape.planted(TOY, np.random.default_rng(5), tau=3.0)
    _, post, _ = posterior(land, random_dist(6, scale=3))
    assert abs(post.sum() - 1) < 1e-12


def test_delta_landscape_gradient_is_score_of_winner():
    table = np.zeros(256)
    table[77] = 50.0
    land = Landscape(TOY, table=table)
    d = random_dist(7)
    winner = all_indices(TOY)[77]
    assert rel_error(exact_grad_pi(land, d), d.grad_log_prob_indices(winner)[0]) < 1e-12


def test_planted_landscape_values():
    land = Landscape(TOY, optimum=np.array([1, 2, 3, 0]), tau=2.0)
    assert land.log_lik_indices(np.array([1, 2, 3, 0]))[0] == 0
    assert land.log_lik_indices(np.array([0, 2, 3, 1]))[0] == -4.0
    np.testing.assert_array_equal(land.argmax_indices(), [1, 2, 3, 0])
    with pytest.raises(ValueError):
        Landscape(TOY, optimum=np.array([4, 0, 0, 0]))


def test_landscape_text_round_trip(tmp_path):
    land = Landscape.planted(TOY, np.random.default_rng(8), tau=0.7)
    land.save(tmp_path / "l.txt")
    lines = (tmp_path / "l.txt").read_text().splitlines()
    assert len(lines) == 257
    back = Landscape.load(tmp_path / "l.txt", TOY)
    np.testing.assert_array_equal(back.table, land.to_table().table)


def test_landscape_text_errors():
    land = Landscape.constant(TOY)
    text = land.dumps()
    with pytest.raises(ValueError, match="missing 1"):
        Landscape.loads("\n".join(text.splitlines()[:-1]), TOY)
    with pytest.raises(ValueError, match="twice"):
        Landscape.loads(text + text.splitlines()[1] + "\n", TOY)
    with pytest.raises(ValueError, match="line 2"):
        Landscape.loads(text.replace("identity", "conv", 1), TOY)


def test_audit_k1_is_zero_mean():
    land = Landscape.planted(TOY, np.random.default_rng(0), tau=1.0)
    rep = estimator_audit(land, ArchDistribution.uniform(TOY), 1, 20_000, np.random.default_rng(1))
    assert np.all(np.abs(rep.mean) <= 4 * rep.stderr)
    assert np.linalg.norm(rep.exact) > 0.1


def test_audit_bias_shrinks_with_k():
    land = Landscape.planted(TOY, np.random.default_rng(0), tau=1.0)
    d = ArchDistribution.uniform(TOY)
    bias = [np.linalg.norm(estimator_audit(land, d, K, 20_000, np.random.default_rng(K)).deviation)
            for K in (2, 8, 64)]
    assert bias[0] > bias[1] > bias[2]


def test_audit_report_json():
    land = Landscape.planted(TOY, np.random.default_rng(0))
    rep = estimator_audit(land, ArchDistribution.uniform(TOY), 4, 100, np.random.default_rng(0))
    doc = json.loads(rep.dumps())
    assert doc["K"] == 4 and len(doc["coordinates"]) == 16
    c = doc["coordinates"][3]
    assert c["deviation"] == pytest.approx(c["mean"] - c["exact"])


def test_zero_gap_landscape_leaves_mode_spread():
    from scipy.stats import chisquare

    land = Landscape.constant(TOY)
    rep = planted_recovery(land, TrainerConfig(K=16), 50, range(200))
    modes = np.array([r.mode for r in rep.runs])
    for s in range(4):
        assert chisquare(np.bincount(modes[:, s], minlength=4)).pvalue > 1e-3
    # uniform weights: only sampling noise moves the logits
    assert np.mean([r.final_entropy / r.initial_entropy for r in rep.runs]) > 0.95


def test_random_baseline_budgets():
    land = Landscape.planted(TOY, np.random.default_rng(3), tau=1.0)
    idx, score = random_baseline(land, 256, np.random.default_rng(0))
    assert score == 0 and np.array_equal(idx, land.argmax_indices())
    idx, score = random_baseline(land, 1, np.random.default_rng(0))
    assert idx.shape == (4,) and score <= 0
    with pytest.raises(ValueError):
        random_baseline(land, 0, np.random.default_rng(0))


def test_sign_test():
    cmp = PairedComparison([1, 1, 1, 1, 1, 0], [0, 0, 0, 0, 0, 0])
    assert (cmp.wins, cmp.losses, cmp.ties) == (5, 0, 1)
    assert cmp.p_value == pytest.approx(1 / 32)
    assert PairedComparison([0], [0]).p_value == 1.0
