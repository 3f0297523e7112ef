from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotorwalk import _kernels as K
from rotorwalk.distributions import OffspringLaw, RotorLaw, RotorMatrix
from rotorwalk.engine import (
    Environment,
    GaltonWatson,
    RandomSource,
    Regular,
    alias_table,
    good_children_census,
    new_environment,
    run,
    run_until_returns,
    srw_run,
    step,
)
from rotorwalk.errors import InsufficientSample, InvalidLaw, MemoryBudgetExceeded, StepCapReached


def point_law(d, j):
    r = [0.0] * (d + 1)
    r[j] = 1.0
    return RotorLaw(d, tuple(r))


def reference_walk(d, rho0, n_steps):
    """Rotor walk on T_d with every initial rotor equal to ``rho0``, vertices as paths."""
    rotor = {}
    cur = None  # sink
    seen = set()
    out = []
    for n in range(1, n_steps + 1):
        if cur is None:
            nxt = ()
        else:
            r = (rotor.get(cur, rho0) + 1) % (d + 1)
            rotor[cur] = r
            if r == 0:
                nxt = cur[:-1] if cur else None
            else:
                nxt = cur + (r,)
        cur = nxt
        if cur is not None:
            seen.add(cur)
        out.append((n, len(seen), 1 if cur is None else len(cur)))
    return out


class TestAlias:
    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=10).filter(lambda v: sum(v) > 1e-6))
    def test_reconstructs_probabilities(self, w):
        p = np.asarray(w) / sum(w)
        prob, alias = alias_table(p)
        n = p.size
        # each column i contributes prob[i]/n to i and (1-prob[i])/n to alias[i]
        back = prob / n
        np.add.at(back, alias, (1 - prob) / n)
        assert np.allclose(back, p, atol=1e-12)


class TestStepRule:
    def test_first_moves(self):
        env = new_environment(Regular(point_law(2, 0)), RandomSource(42))
        assert env.walker.at_sink
        w = step(env)
        assert (w.current, w.n) == (0, 1)
        # root rotor 0 -> 1: first child
        w = step(env, w)
        assert env.store.parent[w.current] == 0
        assert env.store.rotor[0] == 1

    def test_wrap_around_returns_to_parent(self):
        env = Environment(Regular(point_law(2, 2)), RandomSource(1))
        step(env)
        w = step(env)
        assert w.at_sink and env.store.rotor[0] == 0

    def test_fully_wound_first_excursion(self):
        env = Environment(Regular(point_law(2, 2)), RandomSource(5))
        st_ = run_until_returns(env, 1, 100)
        assert st_.return_times.tolist() == [2]
        assert st_.range_at_return.tolist() == [1]

    def test_root_sampled_from_law(self):
        seen = set()
        for s in range(60):
            env = new_environment(Regular(RotorLaw.uniform(2)), RandomSource(s))
            assert env.store.nchild[0] == 2
            seen.add(int(env.store.rotor[0]))
        assert seen == {0, 1, 2}

    def test_gw_deterministic_offspring(self):
        off = OffspringLaw({3: 1.0})
        for s in range(5):
            env = new_environment(GaltonWatson(off, RotorMatrix.uniform([3])), RandomSource(s))
            assert env.store.nchild[0] == 3

    def test_walker_mismatch(self):
        env = Environment(Regular(RotorLaw.uniform(2)), RandomSource(0))
        with pytest.raises(ValueError):
            step(env, type(env.walker)(current=5, n=3))

    @pytest.mark.parametrize("d, j", [(2, 0), (2, 1), (2, 2), (3, 1), (3, 3), (4, 2)])
    def test_matches_reference_walk(self, d, j):
        env = Environment(Regular(point_law(d, j)), RandomSource(0))
        st_ = run(env, 3000, sample_stride=1)
        ref = reference_walk(d, j, 3000)
        assert [tuple(r) for r in st_.samples.tolist()] == ref


class TestDeterminism:
    def test_same_seed_same_trajectory(self):
        law = RotorLaw.uniform(3)
        a = run(Environment(Regular(law), RandomSource(7, 3)), 10_000, 1)
        b = run(Environment(Regular(law), RandomSource(7, 3)), 10_000, 1)
        assert np.array_equal(a.samples, b.samples)

    def test_streams_differ(self):
        law = RotorLaw.uniform(3)
        a = run(Environment(Regular(law), RandomSource(7, 0)), 10_000, 100)
        b = run(Environment(Regular(law), RandomSource(7, 1)), 10_000, 100)
        assert not np.array_equal(a.samples, b.samples)

    @pytest.mark.parametrize("kind", [
        Regular(RotorLaw.uniform(3)),
        GaltonWatson(OffspringLaw({1: 0.3, 3: 0.7}), RotorMatrix.uniform([1, 3])),
    ])
    def test_chunking_and_capacity_do_not_matter(self, kind):
        big = Environment(kind, RandomSource(11), initial_capacity=1 << 20)
        one = run(big, 200_000, 500)
        small = Environment(kind, RandomSource(11), initial_capacity=2)
        for _ in range(40):
            run(small, 5_000, 500)
        chunked = small.stats()
        assert np.array_equal(one.samples, chunked.samples)
        assert one.range_size == chunked.range_size
        assert np.array_equal(big.store.view("rotor0"), small.store.view("rotor0"))

    def test_srw_deterministic(self):
        a = srw_run(Regular(RotorLaw.uniform(3)), RandomSource(2), 20_000, 100)
        b = srw_run(Regular(RotorLaw.uniform(3)), RandomSource(2), 20_000, 100)
        assert np.array_equal(a.samples, b.samples)


class TestInvariants:
    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**32), st.sampled_from(["rotor", "srw"]))
    def test_trajectory_invariants(self, seed, walk):
        env = Environment(Regular(RotorLaw(3, (0.4, 0.3, 0.2, 0.1))), RandomSource(seed), walk=walk)
        st_ = run(env, 5000, 1)
        n, rng, dist = st_.samples.T
        assert np.all(np.diff(rng) >= 0)
        assert np.all(rng <= n + 1)
        # sink sits one step above the root, so distance moves by exactly one
        assert np.all(np.abs(np.diff(dist)) == 1)
        assert np.all(np.diff(st_.return_times) > 0)

    def test_arena_is_range(self):
        env = Environment(Regular(RotorLaw.uniform(2)), RandomSource(3))
        st_ = run(env, 100_000)
        # every materialized vertex has been visited (children are created on entry)
        assert st_.arena_size == st_.range_size
        store = env.store
        par = store.view("parent")[1:]
        assert np.all(store.view("depth")[1:] == store.depth[par] + 1)
        assert np.all(store.view("rotor") <= store.view("nchild"))

    def test_first_visit_order(self):
        env = Environment(Regular(RotorLaw.uniform(3)), RandomSource(3))
        run(env, 50_000)
        fv = env.store.view("first_visit")
        assert np.all(np.diff(fv) > 0)


class TestReturnsAndIdentities:
    @pytest.mark.parametrize("kind", [
        Regular(RotorLaw(2, (0.0, 0.5, 0.5))),
        Regular(RotorLaw.uniform(2)),
        Regular(RotorLaw(3, (0.0, 0.0, 0.0, 1.0))),
        GaltonWatson(OffspringLaw({1: 0.5, 2: 0.5}), RotorMatrix.uniform([1, 2])),
        GaltonWatson(OffspringLaw({1: 0.5, 3: 0.5}), RotorMatrix.uniform([1, 3])),
    ])
    def test_identities_exact(self, kind):
        d = kind.law.d if isinstance(kind, Regular) else None
        total = 0
        for s in range(4):
            st_ = run_until_returns(Environment(kind, RandomSource(s)), 12, 2_000_000)
            audit = st_.identity_audit(d)
            assert audit["ok"], audit
            total += audit["returns"]
        assert total >= 8

    def test_leaf_count_brute_force(self):
        env = Environment(Regular(RotorLaw(2, (0.0, 0.5, 0.5))), RandomSource(9))
        st_ = run_until_returns(env, 10, 10**6)
        ch, nc = env.store.children, env.store.nchild
        for R, L in zip(st_.range_at_return, st_.leaf_count_at_return):
            brute = sum(1 for i in range(R) for j in range(nc[i]) if ch[i, j] < 0 or ch[i, j] >= R)
            assert brute == L

    def test_transient_truncates(self):
        env = Environment(Regular(RotorLaw.uniform(4)), RandomSource(1))
        st_ = run_until_returns(env, 50, 100_000)
        assert st_.truncated and st_.n == 100_000
        with pytest.raises(StepCapReached) as info:
            run_until_returns(Environment(Regular(RotorLaw.uniform(4)), RandomSource(1)), 50, 100_000, strict=True)
        assert info.value.stats is not None

    def test_budget(self):
        env = Environment(Regular(RotorLaw.uniform(4)), RandomSource(1), node_budget=1000, initial_capacity=16)
        with pytest.raises(MemoryBudgetExceeded):
            run(env, 100_000)


class TestCensus:
    def test_uniform_regular(self):
        env = Environment(Regular(RotorLaw.uniform(3)), RandomSource(4))
        run(env, 200_000)
        c = good_children_census(env)
        assert c["pvalue"] > 0.001

    def test_gw(self):
        off = OffspringLaw({1: 0.3, 3: 0.7})
        Q = RotorMatrix({1: (0.2, 0.8), 3: (0.1, 0.2, 0.3, 0.4)})
        env = Environment(GaltonWatson(off, Q), RandomSource(4))
        run(env, 200_000)
        assert good_children_census(env)["pvalue"] > 0.001

    def test_fully_wound_all_zero(self):
        env = Environment(Regular(point_law(2, 2)), RandomSource(0))
        run(env, 20_000)
        c = good_children_census(env)
        assert c["histogram"].tolist() == [c["nodes"], 0, 0]

    def test_all_good(self):
        env = Environment(Regular(point_law(2, 0)), RandomSource(0), node_budget=10**6)
        run(env, 5_000)
        c = good_children_census(env)
        assert c["histogram"][2] == c["nodes"]

    def test_needs_sample(self):
        env = Environment(Regular(RotorLaw.uniform(3)), RandomSource(4))
        run(env, 10)
        with pytest.raises(InsufficientSample):
            good_children_census(env)


class TestConstruction:
    def test_gw_needs_no_leaves(self):
        with pytest.raises(InvalidLaw):
            GaltonWatson(OffspringLaw({0: 0.1, 2: 0.9}))

    def test_gw_rotor_needs_matrix(self):
        with pytest.raises(InvalidLaw):
            Environment(GaltonWatson(OffspringLaw({2: 1.0})), RandomSource(0))

    def test_srw_on_gw_without_matrix(self):
        st_ = srw_run(GaltonWatson(OffspringLaw({2: 1.0})), RandomSource(0), 1000)
        assert st_.walk == "srw" and st_.range_size <= 1001

    def test_srw_one_step(self):
        st_ = srw_run(Regular(RotorLaw.uniform(2)), RandomSource(0), 1)
        assert st_.range_size <= 2

    def test_descriptor(self):
        env = Environment(Regular(RotorLaw.uniform(2)), RandomSource(5, 2))
        st_ = run(env, 10)
        assert st_.environment["seed"] == 5 and st_.environment["stream"] == 2
        assert st_.environment["tree"] == "regular"

    def test_sink_constant(self):
        assert K.SINK == -1
