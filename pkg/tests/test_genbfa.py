import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_mlp
from bitbreaker.fixtures import planted_preset, planted_threshold
from bitbreaker.flipset import FlipSet
from bitbreaker.genbfa import (
    GaConfig,
    crossover,
    fitness,
    mutate,
    optimize,
    prune,
    prune_run,
    stream,
    tournament_select,
)
from bitbreaker.toymodel import Dataset, forward_loss

solutions = st.lists(st.integers(0, 500), min_size=1, max_size=30, unique=True)


@pytest.fixture(scope="module")
def planted():
    """Planted single critical head weight plus 15 weaker decoys."""
    inst = planted_preset("oracle", 0)
    hidden = inst.model.layer("head").weights.shape[1]
    rng = np.random.default_rng(5)
    decoys = [int(i) for i in rng.permutation(inst.model.layer("head").weights.size)
              if i % hidden not in inst.planted_units][:15]
    space = inst.planted.with_indices(sorted(decoys + list(inst.planted.indices)))
    return inst, space, planted_threshold(inst)


class TestFitness:
    def test_above(self):
        assert fitness(8.0, 7.0, 4) == 2.0

    def test_below(self):
        assert fitness(6.0, 7.0, 3) == -2.0

    def test_boundary_counts_as_reached(self):
        assert fitness(7.0, 7.0, 7) == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            fitness(1.0, 0.0, 0)


class TestMutate:
    def test_tiny_rate_keeps_everything(self):
        sol = tuple(range(50))
        assert mutate(sol, 1e-12, np.random.default_rng(0)) == sol

    @given(solutions, st.floats(0.01, 1.0), st.integers(0, 1000))
    def test_removal_only(self, sol, mu, seed):
        out = mutate(tuple(sol), mu, np.random.default_rng(seed))
        assert 1 <= len(out) <= len(sol)
        assert [i for i in sol if i in out] == list(out)

    def test_mean_removed_fraction(self):
        rng = np.random.default_rng(123)
        sol = tuple(range(100))
        removed = [1 - len(mutate(sol, 0.1, rng)) / 100 for _ in range(10_000)]
        assert 0.03 <= np.mean(removed) <= 0.07

    def test_floor_keeps_one(self):
        out = mutate((4, 5, 6), 1.0, np.random.default_rng(0))
        assert len(out) >= 1

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mutate((), 0.1, np.random.default_rng(0))


class TestTournament:
    def test_fitter_always_wins(self):
        pop = [(1,), (2,)]
        for seed in range(50):
            assert tournament_select(pop, [1.0, -1.0], np.random.default_rng(seed)) == (1,)

    def test_ties_go_to_first_drawn(self):
        pop = [(i,) for i in range(6)]
        for seed in range(50):
            a, _ = np.random.default_rng(seed).choice(6, size=2, replace=False)
            assert tournament_select(pop, [0.5] * 6, np.random.default_rng(seed)) == pop[a]

    def test_winner_not_worse(self):
        rng = np.random.default_rng(9)
        fits = rng.standard_normal(20).tolist()
        pop = [(i,) for i in range(20)]
        for seed in range(100):
            a, b = np.random.default_rng(seed).choice(20, size=2, replace=False)
            win = tournament_select(pop, fits, np.random.default_rng(seed))
            assert fits[win[0]] == max(fits[a], fits[b])

    def test_needs_two(self):
        with pytest.raises(ValueError):
            tournament_select([(1,)], [1.0], np.random.default_rng(0))


class TestCrossover:
    def test_disabled(self):
        for seed in range(20):
            assert crossover((1, 2, 3), (4, 5), 0.0, np.random.default_rng(seed)) == (1, 2, 3)

    def test_parent_equals_best(self):
        for seed in range(20):
            assert crossover((7, 3, 9), (7, 3, 9), 1.0, np.random.default_rng(seed)) == (7, 3, 9)

    @given(solutions, solutions, st.integers(0, 1000))
    def test_closure(self, parent, best, seed):
        out = crossover(tuple(parent), tuple(best), 0.9, np.random.default_rng(seed))
        assert out and set(out) <= set(parent) | set(best)
        assert len(set(out)) == len(out)


class TestOptimize:
    def test_planted_single_flip(self, planted):
        inst, space, th = planted
        m, d = inst.model, inst.dataset
        singles = [i for i in space.indices if forward_loss(m, d, space.with_indices([i])) >= th]
        assert singles == list(inst.planted.indices)
        res = optimize(m, d, space, GaConfig(th, seed=1))
        assert res.flipset.indices == inst.planted.indices
        assert res.success and res.loss >= th

    def test_singleton_subset(self, planted):
        inst, _, th = planted
        res = optimize(inst.model, inst.dataset, inst.planted, GaConfig(th, seed=0))
        assert res.flipset == inst.planted
        assert res.history[0].best_cardinality == 1

    def test_invariants(self, planted):
        inst, space, th = planted
        res = optimize(inst.model, inst.dataset, space, GaConfig(th, seed=3, max_generations_g=40))
        fits = [h.best_fitness for h in res.history]
        assert all(b >= a for a, b in zip(fits, fits[1:]))
        assert res.success == (res.fitness >= 0) == (res.loss >= th)
        assert set(res.flipset.indices) <= set(space.indices)
        final = forward_loss(inst.model, inst.dataset, res.flipset)
        assert abs(res.history[-1].best_loss - final) <= 1e-12
        assert res.history[-1].best_cardinality == len(res.flipset)

    def test_candidates_stay_inside_subset(self, planted, monkeypatch):
        from bitbreaker import genbfa
        inst, space, th = planted
        seen = []
        original = genbfa.bflip_loss

        def spy(m, fs, d):
            seen.append(fs.indices)
            return original(m, fs, d)

        monkeypatch.setattr(genbfa, "bflip_loss", spy)
        optimize(inst.model, inst.dataset, space, GaConfig(th, seed=2, max_generations_g=10))
        assert seen and all(set(s) <= set(space.indices) for s in seen)

    def test_deterministic_across_threads(self, planted):
        inst, space, th = planted
        cfg = GaConfig(th, seed=4, max_generations_g=30)
        a = optimize(inst.model, inst.dataset, space, cfg, threads=1)
        b = optimize(inst.model, inst.dataset, space, cfg, threads=4)
        assert a == b

    def test_stale_limit_stops_early(self, planted):
        inst, space, th = planted
        res = optimize(inst.model, inst.dataset, space, GaConfig(th, seed=0, no_improve_N=3))
        fits = [h.best_fitness for h in res.history]
        last_gain = max(j for j in range(len(fits)) if j == 0 or fits[j] > fits[j - 1])
        assert len(fits) < 150
        assert len(fits) - 1 - last_gain == 3

    def test_unreachable_threshold_reports_failure(self, planted):
        inst, space, _ = planted
        res = optimize(inst.model, inst.dataset, space, GaConfig(1e6, seed=0, max_generations_g=5))
        assert not res.success and res.fitness < 0

    def test_history_csv(self, planted):
        inst, space, th = planted
        res = optimize(inst.model, inst.dataset, space, GaConfig(th, seed=0, max_generations_g=3))
        lines = res.history_csv().splitlines()
        assert lines[0] == "generation,best_fitness,best_loss,best_cardinality"
        assert len(lines) == 1 + len(res.history)

    def test_streams_are_independent(self):
        assert stream(0, 1, 2).random() != stream(0, 2, 1).random()
        assert stream(5, 3, 3).random() == stream(5, 3, 3).random()

    @pytest.mark.parametrize("kwargs", [dict(population_m=0), dict(mutation_rate_mu=0.0), dict(crossover_prob_pc=1.5),
                                        dict(no_improve_N=0), dict(seed=-1)])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            GaConfig(1.0, **kwargs)


@pytest.fixture(scope="module")
def dead_unit():
    """ReLU model whose hidden unit 2 is always zero, so head column 2 is inert."""
    rng = np.random.default_rng(0)
    w1 = rng.integers(-50, 50, (4, 3))
    w1[2] = 0
    w2 = rng.integers(-50, 50, (3, 4))
    m = tiny_mlp(w1, w2, scale=0.05)
    x = rng.standard_normal((20, 3))
    return m, Dataset(x, rng.integers(0, 3, 20))


class TestPrune:
    def test_inert_index_is_removed(self, dead_unit):
        m, d = dead_unit
        fs = FlipSet("head", (0, 1, 6), 7)  # index 6 = row 1, column 2
        assert forward_loss(m, d, fs) == forward_loss(m, d, fs.with_indices((0, 1)))
        for i in (0, 1):
            assert abs(forward_loss(m, d, fs) - forward_loss(m, d, fs.with_indices([j for j in fs.indices if j != i]))) > 1e-6
        out = prune(m, d, fs, epsilon=1e-9, max_iters_T=1000, rng=np.random.default_rng(0))
        assert out.indices == (0, 1)

    def test_tiny_epsilon_keeps_everything(self, dead_unit):
        m, d = dead_unit
        fs = FlipSet("head", (0, 1, 4), 7)
        assert prune(m, d, fs, epsilon=1e-300, rng=np.random.default_rng(0)) == fs

    def test_loss_within_epsilon_and_terminal_streak(self, planted):
        inst, space, _ = planted
        m, d = inst.model, inst.dataset
        res = prune_run(m, d, space, rng=np.random.default_rng(7))
        assert res.epsilon == pytest.approx(0.01 * res.reference_loss)
        assert abs(res.loss - res.reference_loss) < res.epsilon
        for i in res.terminal_rejections:
            assert i in res.flipset.indices
            rest = [j for j in res.flipset.indices if j != i]
            assert abs(res.reference_loss - forward_loss(m, d, space.with_indices(rest))) >= res.epsilon

    def test_single_element_untouched(self, dead_unit):
        m, d = dead_unit
        res = prune_run(m, d, FlipSet("head", (6,), 7))
        assert res.iterations == 0 and res.flipset.indices == (6,)

    def test_validation(self, dead_unit):
        m, d = dead_unit
        with pytest.raises(ValueError):
            prune(m, d, FlipSet("head", (), 7))
        with pytest.raises(ValueError):
            prune(m, d, FlipSet("head", (1,), 7), epsilon=0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_elitism_on_random_seeds(seed):
    inst = planted_preset("oracle", seed % 5)
    space = FlipSet("head", tuple(range(0, inst.model.layer("head").weights.size, 11)), 7)
    res = optimize(inst.model, inst.dataset, space, GaConfig(planted_threshold(inst), population_m=10,
                                                             max_generations_g=8, seed=seed))
    fits = [h.best_fitness for h in res.history]
    assert all(b >= a for a, b in zip(fits, fits[1:]))
    assert not math.isnan(res.fitness)
