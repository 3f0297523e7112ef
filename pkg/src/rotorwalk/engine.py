"""Rotor walks and simple random walks on lazily generated random trees.

Vertices are materialized on first visit into a growable arena.  Neighbour
slot 0 of every vertex is its parent and slots ``1..k`` are its children in
rotor order, so a child ``j`` is good exactly when the initial rotor is
``< j``.  The root's parent is a virtual sink with a single forced move back
to the root; the walker starts on the sink, so each return to the sink closes
a complete excursion.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Optional, Union

import numpy as np
from scipy import stats as sps

from . import _kernels as K
from .distributions import OffspringLaw, RotorLaw, RotorMatrix, good_child_law
from .errors import InsufficientSample, InvalidLaw, MemoryBudgetExceeded, StepCapReached

log = logging.getLogger(__name__)

DEFAULT_NODE_BUDGET = 200_000_000
INDEX_LIMIT = 2**31 - 2
UNIFORM_CHUNK = 1 << 16
MAX_CHILDREN = 127


@dataclass(frozen=True)
class RandomSource:
    """Seed plus stream id; each pair yields an independent PCG64 stream."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream),))
        return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class Regular:
    law: RotorLaw

    @property
    def max_children(self) -> int:
        return self.law.d

    def describe(self) -> dict:
        return {"tree": "regular", **self.law.to_dict()}


@dataclass(frozen=True)
class GaltonWatson:
    off: OffspringLaw
    Q: Optional[RotorMatrix] = None

    def __post_init__(self):
        if self.off.prob(0) > 0:
            raise InvalidLaw("Galton-Watson environments need p_0 = 0")
        if self.off.max_k > MAX_CHILDREN:
            raise InvalidLaw(f"offspring counts above {MAX_CHILDREN} are not supported")
        if self.Q is not None:
            self.Q.check_covers(self.off)

    @property
    def max_children(self) -> int:
        return self.off.max_k

    def describe(self) -> dict:
        out = {"tree": "galton-watson", "offspring": self.off.to_dict()["p"]}
        if self.Q is not None:
            out["Q"] = self.Q.to_dict()["rows"]
        return out


EnvKind = Union[Regular, GaltonWatson]


def alias_table(probs) -> tuple[np.ndarray, np.ndarray]:
    """Vose alias table for drawing from ``probs`` with one uniform."""
    p = np.asarray(probs, dtype=float)
    n = p.size
    scaled = p * n / p.sum()
    prob = np.ones(n)
    alias = np.arange(n, dtype=np.int64)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s = small.pop()
        g = large.pop()
        prob[s] = scaled[s]
        alias[s] = g
        scaled[g] = scaled[g] + scaled[s] - 1.0
        (small if scaled[g] < 1.0 else large).append(g)
    # leftovers are 1 up to rounding
    for i in small + large:
        prob[i] = 1.0
        alias[i] = i
    return prob, alias


class NodeStore:
    """Arena of materialized vertices, stored column-wise in numpy arrays."""

    def __init__(self, max_children: int, capacity: int = 1024, budget: int = DEFAULT_NODE_BUDGET):
        self.max_children = int(max_children)
        self.budget = min(int(budget), INDEX_LIMIT)
        cap = max(1, min(int(capacity), self.budget))
        self.parent = np.empty(cap, dtype=np.int32)
        self.depth = np.empty(cap, dtype=np.int32)
        self.nchild = np.empty(cap, dtype=np.int8)
        self.rotor = np.empty(cap, dtype=np.int8)
        self.rotor0 = np.empty(cap, dtype=np.int8)
        self.children = np.empty((cap, self.max_children), dtype=np.int32)
        self.first_visit = np.empty(cap, dtype=np.int64)
        self.keep = np.empty(cap, dtype=np.uint8)
        self.freelist = np.empty(cap, dtype=np.int32)
        self.size = 0

    @property
    def capacity(self) -> int:
        return self.parent.shape[0]

    def grow(self) -> None:
        cap = self.capacity
        if cap >= self.budget:
            raise MemoryBudgetExceeded(f"node arena reached its budget of {self.budget} vertices")
        new = min(2 * cap, self.budget)
        for name in ("parent", "depth", "nchild", "rotor", "rotor0", "first_visit", "keep", "freelist"):
            old = getattr(self, name)
            arr = np.empty(new, dtype=old.dtype)
            arr[:cap] = old
            setattr(self, name, arr)
        ch = np.empty((new, self.max_children), dtype=np.int32)
        ch[:cap] = self.children
        self.children = ch

    def arrays(self):
        return (
            self.parent, self.depth, self.nchild, self.rotor, self.rotor0,
            self.children, self.first_visit, self.keep, self.freelist,
        )

    def view(self, name: str) -> np.ndarray:
        return getattr(self, name)[: self.size]


@dataclass
class WalkerState:
    current: int = K.SINK
    n: int = 0

    @property
    def at_sink(self) -> bool:
        return self.current == K.SINK


@dataclass
class TrajectoryStats:
    samples: np.ndarray
    return_times: np.ndarray
    range_at_return: np.ndarray
    leaf_count_at_return: np.ndarray
    children_sum_at_return: np.ndarray
    seed: int
    stream: int
    environment: dict
    n: int
    range_size: int
    depth: int
    arena_size: int
    truncated: bool = False
    walk: str = "rotor"
    extra: dict = field(default_factory=dict)

    @property
    def range_ratio(self) -> float:
        return self.range_size / self.n if self.n else float("nan")

    @property
    def depth_ratio(self) -> float:
        return self.depth / self.n if self.n else float("nan")

    def identity_audit(self, d: Optional[int] = None) -> dict:
        """Check the exact excursion identities at every recorded return.

        ``tau_k - tau_{k-1} = 2|R_{tau_k}|`` and the outer-boundary count
        ``L_k = 1 + sum_{v in R_k} xi_v - |R_k|`` (``1 + (d-1)|R_k|`` on the
        regular tree).  All comparisons are exact integer equalities.
        """
        tau = np.concatenate(([0], self.return_times))
        rk = self.range_at_return
        tau_ok = np.diff(tau) == 2 * rk
        leaf_gw = 1 + self.children_sum_at_return - rk
        leaf_ok = self.leaf_count_at_return == leaf_gw
        out = {
            "returns": int(rk.size),
            "tau_identity_failures": int((~tau_ok).sum()),
            "leaf_identity_failures": int((~leaf_ok).sum()),
        }
        if d is not None:
            reg_ok = self.leaf_count_at_return == 1 + (d - 1) * rk
            out["leaf_regular_identity_failures"] = int((~reg_ok).sum())
        out["ok"] = all(v == 0 for k, v in out.items() if k.endswith("failures"))
        return out


def _rotor_tables(kind: EnvKind):
    """Per child count ``k``, alias tables over initial rotor values ``0..k``."""
    kmax = kind.max_children
    prob = np.zeros((kmax + 1, kmax + 1))
    alias = np.zeros((kmax + 1, kmax + 1), dtype=np.int64)
    if isinstance(kind, Regular):
        rows = {kind.law.d: kind.law.r}
    elif kind.Q is not None:
        # Q_k lists good-child counts l; the rotor is k - l
        rows = {k: tuple(reversed(kind.Q.row(k))) for k in kind.off.support}
    else:
        rows = {}
    for k, row in rows.items():
        p, a = alias_table(row)
        prob[k, : k + 1] = p
        alias[k, : k + 1] = a
    return prob, alias


class Environment:
    """Random tree plus rotor configuration, sampled lazily as the walker explores."""

    def __init__(
        self,
        kind: EnvKind,
        rng: RandomSource,
        walk: Literal["rotor", "srw"] = "rotor",
        node_budget: int = DEFAULT_NODE_BUDGET,
        initial_capacity: int = 4096,
        prune_depth: Optional[int] = None,
    ):
        if walk not in ("rotor", "srw"):
            raise ValueError(f"unknown walk kind {walk!r}")
        if walk == "rotor" and isinstance(kind, GaltonWatson) and kind.Q is None:
            raise InvalidLaw("rotor walks on Galton-Watson trees need a rotor matrix")
        if prune_depth is not None and (walk != "rotor" or not isinstance(kind, Regular)):
            raise ValueError("pruned stores are only supported for rotor walks on regular trees")
        self.kind = kind
        self.rng = rng
        self.walk = walk
        self.prune_depth = prune_depth
        self._walk_code = K.WALK_ROTOR if walk == "rotor" else K.WALK_SRW
        self._gen = rng.generator()
        self.store = NodeStore(kind.max_children, initial_capacity, node_budget)

        if isinstance(kind, Regular):
            self._fixed_deg = kind.law.d
            # None selects the fixed-degree specialisation of the kernel
            self._off_prob = None
            self._off_alias = np.zeros(1, dtype=np.int64)
            self._off_vals = np.full(1, kind.law.d, dtype=np.int64)
        else:
            self._fixed_deg = 0
            self._off_prob, self._off_alias = alias_table(list(kind.off.p.values()))
            self._off_vals = np.asarray(kind.off.support, dtype=np.int64)
        self._rot_prob, self._rot_alias = _rotor_tables(kind)
        if walk == "srw":
            self._rot_prob = None

        self.state = np.zeros(K.STATE_LEN, dtype=np.int64)
        self.state[K.S_CUR] = K.SINK
        self._uni = self._gen.random(UNIFORM_CHUNK)
        self._samples = np.empty((256, 3), dtype=np.int64)
        self._ret_times = np.empty(64, dtype=np.int64)
        self._ret_range = np.empty(64, dtype=np.int64)
        self.truncated = False

        # root, drawn from the same uniform stream as every other vertex
        K.materialize(
            0, -1, 1, self.state, self._uni, *self.store.arrays()[:8],
            self._walk_code, self._fixed_deg, self._off_prob, self._off_alias,
            self._off_vals, self._rot_prob, self._rot_alias,
        )
        self.state[K.S_SIZE] = 1
        self.state[K.S_LIVE] = 1
        self.state[K.S_PEAK_LIVE] = 1
        self.store.size = 1

    # -- plumbing ---------------------------------------------------------
    @property
    def walker(self) -> WalkerState:
        return WalkerState(int(self.state[K.S_CUR]), int(self.state[K.S_N]))

    @property
    def descriptor(self) -> dict:
        return {
            **self.kind.describe(),
            "walk": self.walk,
            "seed": int(self.rng.seed),
            "stream": int(self.rng.stream),
        }

    def _refill(self) -> None:
        pos = int(self.state[K.S_POS])
        self._uni = np.concatenate((self._uni[pos:], self._gen.random(UNIFORM_CHUNK)))
        self.state[K.S_POS] = 0

    @staticmethod
    def _grow(arr: np.ndarray) -> np.ndarray:
        out = np.empty((2 * arr.shape[0],) + arr.shape[1:], dtype=arr.dtype)
        out[: arr.shape[0]] = arr
        return out

    def _advance(self, n_target: int, k_target: int, stride: int) -> int:
        store = self.store
        while True:
            status = K.walk_loop(
                self.state, self._uni, *store.arrays(),
                self._walk_code, self._fixed_deg, self._off_prob, self._off_alias,
                self._off_vals, self._rot_prob, self._rot_alias,
                n_target, k_target, stride, self._samples, self._ret_times, self._ret_range,
                self.prune_depth is not None,
                -1 if self.prune_depth is None else self.prune_depth,
            )
            store.size = int(self.state[K.S_SIZE])
            if status in (K.DONE_STEPS, K.DONE_RETURNS):
                return status
            if status == K.NEED_UNIFORMS:
                self._refill()
            elif status == K.NEED_ARENA:
                store.grow()
            elif status == K.NEED_RETURNS:
                self._ret_times = self._grow(self._ret_times)
                self._ret_range = self._grow(self._ret_range)
            elif status == K.NEED_SAMPLES:
                self._samples = self._grow(self._samples)
            else:  # pragma: no cover
                raise RuntimeError(f"unexpected kernel status {status}")

    def stats(self) -> TrajectoryStats:
        nret = int(self.state[K.S_NRET])
        rk = self._ret_range[:nret].copy()
        if self.prune_depth is None:
            leaves, xi = K.boundary_counts(self.store.nchild, self.store.children, rk)
        else:
            leaves = np.full(nret, -1, dtype=np.int64)
            xi = np.full(nret, -1, dtype=np.int64)
        cur = int(self.state[K.S_CUR])
        return TrajectoryStats(
            samples=self._samples[: int(self.state[K.S_NSAMP])].copy(),
            return_times=self._ret_times[:nret].copy(),
            range_at_return=rk,
            leaf_count_at_return=leaves,
            children_sum_at_return=xi,
            seed=int(self.rng.seed),
            stream=int(self.rng.stream),
            environment=self.descriptor,
            n=int(self.state[K.S_N]),
            range_size=int(self.state[K.S_RANGE]),
            depth=1 if cur == K.SINK else int(self.store.depth[cur]),
            arena_size=self.store.size,
            truncated=self.truncated,
            walk=self.walk,
            extra={"peak_live_nodes": int(self.state[K.S_PEAK_LIVE])},
        )


def new_environment(
    kind: EnvKind,
    rng: RandomSource,
    walk: Literal["rotor", "srw"] = "rotor",
    node_budget: int = DEFAULT_NODE_BUDGET,
    **kw,
) -> Environment:
    return Environment(kind, rng, walk=walk, node_budget=node_budget, **kw)


def step(env: Environment, walker: Optional[WalkerState] = None) -> WalkerState:
    """Advance the walk by one move and return the new walker state."""
    if walker is not None and (walker.current, walker.n) != (env.walker.current, env.walker.n):
        raise ValueError("walker state does not belong to this environment")
    env._advance(int(env.state[K.S_N]) + 1, np.iinfo(np.int64).max, 1 << 62)
    return env.walker


def run(env: Environment, n_steps: int, sample_stride: int = 1000) -> TrajectoryStats:
    """Run ``n_steps`` more steps, sampling ``(n, |R_n|, |X_n|)`` every stride."""
    if n_steps < 1 or sample_stride < 1:
        raise ValueError("n_steps and sample_stride must be >= 1")
    target = int(env.state[K.S_N]) + int(n_steps)
    env._advance(target, np.iinfo(np.int64).max, int(sample_stride))
    return env.stats()


def run_until_returns(
    env: Environment,
    k_returns: int,
    step_cap: int,
    sample_stride: int = 1 << 62,
    strict: bool = False,
) -> TrajectoryStats:
    """Run until the ``k_returns``-th return to the sink or ``step_cap`` total steps."""
    if k_returns < 1:
        raise ValueError("k_returns must be >= 1")
    status = env._advance(int(step_cap), int(k_returns), int(sample_stride))
    if status != K.DONE_RETURNS:
        env.truncated = True
    st = env.stats()
    if env.truncated and strict:
        raise StepCapReached(f"only {st.return_times.size} of {k_returns} returns within {step_cap} steps", st)
    return st


def srw_run(
    env_shape: EnvKind,
    rng: RandomSource,
    n_steps: int,
    sample_stride: int = 1000,
    node_budget: int = DEFAULT_NODE_BUDGET,
) -> TrajectoryStats:
    """Simple random walk baseline on the same lazily built tree shape."""
    env = Environment(env_shape, rng, walk="srw", node_budget=node_budget)
    return run(env, n_steps, sample_stride)


def good_children_census(env: Environment, min_nodes: int = 1000) -> dict:
    """Histogram of good-children counts using pristine initial rotors.

    Returns the histogram together with a chi-square goodness-of-fit test
    against the theoretical good-child law.
    """
    if env.walk != "rotor":
        raise ValueError("census needs a rotor walk environment")
    n = env.store.size
    if n < min_nodes:
        raise InsufficientSample(f"only {n} materialized vertices, need {min_nodes}")
    nchild = env.store.view("nchild").astype(np.int64)
    good = nchild - env.store.view("rotor0").astype(np.int64)
    kmax = env.kind.max_children
    hist = np.bincount(good, minlength=kmax + 1)
    if isinstance(env.kind, Regular):
        law = good_child_law(env.kind.law)
        expected = np.array([law.prob(j) for j in range(kmax + 1)])
    else:
        # condition on the realised child counts, not just the marginal law
        expected = np.zeros(kmax + 1)
        counts = np.bincount(nchild, minlength=kmax + 1)
        for k in range(kmax + 1):
            if counts[k]:
                expected[: k + 1] += counts[k] * np.asarray(env.kind.Q.row(k))
        expected /= n
    mask = expected > 0
    if np.any(hist[~mask]):
        pvalue = 0.0
    elif mask.sum() < 2:
        pvalue = 1.0
    else:
        pvalue = float(sps.chisquare(hist[mask], expected[mask] * n).pvalue)
    return {"histogram": hist, "expected": expected, "nodes": n, "pvalue": pvalue}
