"""Permutation groups and the orbit partitions of index tuples.

Every sharing scheme in the package is an :class:`OrbitTable`: the partition of
``[N]^k_out x [N]^k_in`` into orbits of the diagonal group action.  Family groups
(trivial, symmetric, cyclic and their direct products) are typed in closed form;
groups given by generators are closed by label propagation over the tuple graph.
"""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_BUDGET = 10**7


class GroupError(ValueError):
    """Invalid group description or group operation."""


class BudgetExceeded(GroupError):
    """Raised when an enumeration would touch more tuples than allowed."""


@dataclass(frozen=True)
class Permutation:
    """Bijection of ``{0..n-1}``; ``mapping[i]`` is the image of ``i``."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        m = tuple(int(v) for v in self.mapping)
        if sorted(m) != list(range(len(m))):
            raise GroupError(f"not a bijection on [0, {len(m)}): {m}")
        object.__setattr__(self, "mapping", m)

    @property
    def n(self) -> int:
        return len(self.mapping)

    @classmethod
    def identity(cls, n: int) -> Permutation:
        return cls(tuple(range(n)))

    @classmethod
    def from_cycles(cls, n: int, cycles: Sequence[Sequence[int]]) -> Permutation:
        m = list(range(n))
        seen: set[int] = set()
        for cyc in cycles:
            for v in cyc:
                if not 0 <= v < n:
                    raise GroupError(f"cycle entry {v} outside [0, {n})")
                if v in seen:
                    raise GroupError(f"entry {v} appears in two cycles")
                seen.add(v)
            for a, b in zip(cyc, list(cyc[1:]) + list(cyc[:1])):
                m[a] = b
        return cls(tuple(m))

    def __call__(self, i: int) -> int:
        return self.mapping[i]

    def compose(self, other: Permutation) -> Permutation:
        """``self o other``: apply ``other`` first."""
        return compose(self, other)

    __mul__ = compose

    def inverse(self) -> Permutation:
        inv = [0] * self.n
        for i, v in enumerate(self.mapping):
            inv[v] = i
        return Permutation(tuple(inv))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.mapping, dtype=np.int64)

    def is_identity(self) -> bool:
        return all(i == v for i, v in enumerate(self.mapping))

    def cycles(self) -> list[tuple[int, ...]]:
        out, seen = [], set()
        for start in range(self.n):
            if start in seen or self.mapping[start] == start:
                continue
            cyc, i = [], start
            while i not in seen:
                seen.add(i)
                cyc.append(i)
                i = self.mapping[i]
            out.append(tuple(cyc))
        return out

    def __str__(self) -> str:
        cyc = self.cycles()
        return "".join("(" + " ".join(map(str, c)) + ")" for c in cyc) or "()"


def compose(a: Permutation, b: Permutation) -> Permutation:
    """Return ``a o b``, i.e. ``result[i] = a[b[i]]``."""
    if a.n != b.n:
        raise GroupError(f"size mismatch: {a.n} vs {b.n}")
    return Permutation(tuple(a.mapping[j] for j in b.mapping))


def act_on_tuple(sigma: Permutation, t: Sequence[int]) -> tuple[int, ...]:
    for v in t:
        if not 0 <= v < sigma.n:
            raise GroupError(f"index {v} outside [0, {sigma.n})")
    return tuple(sigma.mapping[v] for v in t)


# ---------------------------------------------------------------------------
# group descriptions
# ---------------------------------------------------------------------------


class GroupSpec:
    """A permutation group acting on ``degree`` points.

    ``shape`` is the domain shape the points are flattened from (row-major),
    e.g. ``(n,)`` for a set or ``(n, m)`` for a matrix under a direct product.
    """

    degree: int
    is_family = True

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.degree,)

    def generators(self) -> list[Permutation]:
        raise NotImplementedError

    def random_element(self, rng: np.random.Generator) -> Permutation:
        raise NotImplementedError

    def type_keys(self, tuples: np.ndarray) -> np.ndarray:
        """Closed-form orbit type of each row of ``tuples`` (shape ``(M, L)``)."""
        raise NotImplementedError

    def relaxed_mask(self, tuples: np.ndarray, key: np.ndarray) -> np.ndarray:
        """Rows of ``tuples`` that satisfy the orbit ``key`` with every
        "distinct" constraint of a symmetric factor dropped."""
        return np.all(self.type_keys(tuples) == key, axis=1)

    def resized(self, size) -> GroupSpec:
        raise GroupError(f"{self} cannot be re-instantiated at a different size")

    def __eq__(self, other) -> bool:
        return isinstance(other, GroupSpec) and str(self) == str(other)

    def __hash__(self) -> int:
        return hash(str(self))

    def __repr__(self) -> str:
        return f"GroupSpec({self})"


class Trivial(GroupSpec):
    def __init__(self, n: int):
        _check_n(n)
        self.degree = n

    def generators(self):
        return []

    def random_element(self, rng):
        return Permutation.identity(self.degree)

    def type_keys(self, tuples):
        return np.asarray(tuples, dtype=np.int64)

    def resized(self, size):
        if int(size) != self.degree:
            # every orbit is a singleton, so types never transfer across n
            raise GroupError("trivial-group layers are tied to their size")
        return self

    def __str__(self):
        return f"T({self.degree})"


class Symmetric(GroupSpec):
    def __init__(self, n: int):
        _check_n(n)
        self.degree = n

    def generators(self):
        n = self.degree
        if n < 2:
            return []
        gens = [Permutation.from_cycles(n, [(0, 1)])]
        if n > 2:
            gens.append(Permutation(tuple((i + 1) % n for i in range(n))))
        return gens

    def random_element(self, rng):
        return Permutation(tuple(rng.permutation(self.degree)))

    def type_keys(self, tuples):
        # equality pattern, labelled by first occurrence: (2, 5, 2) -> (0, 1, 0)
        t = np.asarray(tuples, dtype=np.int64)
        m, length = t.shape
        labels = np.zeros((m, length), dtype=np.int64)
        nxt = np.zeros(m, dtype=np.int64)
        for j in range(length):
            lab = nxt.copy()
            assigned = np.zeros(m, dtype=bool)
            for i in range(j):
                hit = (t[:, i] == t[:, j]) & ~assigned
                lab[hit] = labels[hit, i]
                assigned |= hit
            labels[:, j] = lab
            nxt = nxt + ~assigned
        return labels

    def relaxed_mask(self, tuples, key):
        t = np.asarray(tuples, dtype=np.int64)
        mask = np.ones(len(t), dtype=bool)
        key = np.asarray(key)
        for a in range(len(key)):
            for b in range(a + 1, len(key)):
                if key[a] == key[b]:
                    mask &= t[:, a] == t[:, b]
        return mask

    def resized(self, size):
        return Symmetric(int(size))

    def __str__(self):
        return f"S({self.degree})"


class Cyclic(GroupSpec):
    def __init__(self, n: int):
        _check_n(n)
        self.degree = n

    def generators(self):
        n = self.degree
        return [] if n < 2 else [Permutation(tuple((i + 1) % n for i in range(n)))]

    def random_element(self, rng):
        s = int(rng.integers(self.degree))
        return Permutation(tuple((i + s) % self.degree for i in range(self.degree)))

    def type_keys(self, tuples):
        t = np.asarray(tuples, dtype=np.int64)
        if t.shape[1] == 0:
            return t
        return (t - t[:, :1]) % self.degree

    def resized(self, size):
        if int(size) != self.degree:
            raise GroupError("cyclic shift classes do not transfer across sizes")
        return self

    def __str__(self):
        return f"C({self.degree})"


class DirectProduct(GroupSpec):
    """``left x right`` acting on a ``(n, m)`` grid flattened as ``i*m + j``."""

    def __init__(self, left: GroupSpec, right: GroupSpec):
        self.left, self.right = left, right
        self.degree = left.degree * right.degree
        self.is_family = left.is_family and right.is_family

    @property
    def shape(self):
        return self.left.shape + self.right.shape

    def _lift(self, a: Permutation, b: Permutation) -> Permutation:
        m = self.right.degree
        return Permutation(
            tuple(a.mapping[f // m] * m + b.mapping[f % m] for f in range(self.degree))
        )

    def generators(self):
        idl = Permutation.identity(self.left.degree)
        idr = Permutation.identity(self.right.degree)
        return [self._lift(g, idr) for g in self.left.generators()] + [
            self._lift(idl, g) for g in self.right.generators()
        ]

    def random_element(self, rng):
        return self._lift(self.left.random_element(rng), self.right.random_element(rng))

    def _split(self, tuples):
        t = np.asarray(tuples, dtype=np.int64)
        m = self.right.degree
        return t // m, t % m

    def type_keys(self, tuples):
        a, b = self._split(tuples)
        return np.concatenate([self.left.type_keys(a), self.right.type_keys(b)], axis=1)

    def relaxed_mask(self, tuples, key):
        a, b = self._split(tuples)
        wl = self.left.type_keys(a[:1]).shape[1]
        key = np.asarray(key)
        return self.left.relaxed_mask(a, key[:wl]) & self.right.relaxed_mask(b, key[wl:])

    def resized(self, size):
        if np.ndim(size) == 0 or len(size) != 2:
            raise GroupError("direct products are resized with one size per factor")
        return DirectProduct(self.left.resized(size[0]), self.right.resized(size[1]))

    def __str__(self):
        return f"prod({self.left},{self.right})"


class Generated(GroupSpec):
    """Subgroup of ``S_n`` given by generators; orbits found by closure."""

    is_family = False

    def __init__(self, n: int, gens: Sequence[Permutation]):
        _check_n(n)
        for g in gens:
            if g.n != n:
                raise GroupError(f"generator {g} acts on {g.n} points, expected {n}")
        self.degree = n
        self.gens = list(gens)

    def generators(self):
        return list(self.gens)

    def random_element(self, rng):
        out = Permutation.identity(self.degree)
        if not self.gens:
            return out
        for _ in range(int(rng.integers(0, 17))):
            out = compose(self.gens[int(rng.integers(len(self.gens)))], out)
        return out

    def type_keys(self, tuples):
        raise GroupError("generated groups have no closed-form orbit typing")

    def __str__(self):
        body = ", ".join("[" + ",".join(map(str, g.mapping)) + "]" for g in self.gens)
        return f"gen({self.degree}; {body})"


def _check_n(n):
    if int(n) != n or n < 1:
        raise GroupError(f"group size must be a positive integer, got {n!r}")


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_SIMPLE = {"S": Symmetric, "C": Cyclic, "T": Trivial, "Trivial": Trivial}


def parse_group(text: str) -> GroupSpec:
    """Parse ``S(n)``, ``C(n)``, ``T(n)``, ``prod(g, h)`` or ``gen(n; ...)``.

    Generators inside ``gen`` are comma separated and written either in cycle
    notation, ``(0 1 2)(3 4)``, or one-line notation, ``[1,0,2,3,4]``.
    """
    group, rest = _parse(text.strip())
    if rest.strip():
        raise GroupError(f"trailing text in group spec: {rest!r}")
    return group


def _parse(s: str):
    m = re.match(r"\s*([A-Za-z]+)\s*\(", s)
    if not m:
        raise GroupError(f"cannot parse group spec: {s!r}")
    name, s = m.group(1), s[m.end():]
    if name in _SIMPLE:
        m = re.match(r"\s*(\d+)\s*\)", s)
        if not m:
            raise GroupError(f"{name}(...) expects a positive integer")
        return _SIMPLE[name](int(m.group(1))), s[m.end():]
    if name == "prod":
        factors = []
        while True:
            g, s = _parse(s)
            factors.append(g)
            s = s.lstrip()
            if s.startswith(","):
                s = s[1:]
                continue
            if s.startswith(")"):
                s = s[1:]
                break
            raise GroupError("expected ',' or ')' in prod(...)")
        if len(factors) < 2:
            raise GroupError("prod(...) needs at least two factors")
        g = factors[0]
        for f in factors[1:]:
            g = DirectProduct(g, f)
        return g, s
    if name == "gen":
        m = re.match(r"\s*(\d+)\s*;", s)
        if not m:
            raise GroupError("gen(...) expects 'gen(n; generators)'")
        n, s = int(m.group(1)), s[m.end():]
        depth, end = 0, None
        for idx, ch in enumerate(s):
            if ch in "([":
                depth += 1
            elif ch in ")]":
                if depth == 0:
                    end = idx
                    break
                depth -= 1
        if end is None:
            raise GroupError("unterminated gen(...)")
        return Generated(n, _parse_generators(n, s[:end])), s[end + 1:]
    raise GroupError(f"unknown group family {name!r}")


def _parse_generators(n: int, body: str) -> list[Permutation]:
    gens, i, body = [], 0, body.strip()
    while i < len(body):
        ch = body[i]
        if ch in " ,\t":
            i += 1
            continue
        if ch == "[":
            j = body.index("]", i)
            vals = [int(v) for v in re.split(r"[,\s]+", body[i + 1:j].strip()) if v]
            if len(vals) != n:
                raise GroupError(f"one-line generator has {len(vals)} entries, expected {n}")
            gens.append(Permutation(tuple(vals)))
            i = j + 1
        elif ch == "(":
            cycles = []
            while i < len(body) and body[i] == "(":
                j = body.index(")", i)
                cycles.append([int(v) for v in re.split(r"[,\s]+", body[i + 1:j].strip()) if v])
                i = j + 1
                while i < len(body) and body[i] == " ":
                    i += 1
            gens.append(Permutation.from_cycles(n, cycles))
        else:
            raise GroupError(f"unexpected character {ch!r} in generator list")
    return gens


# ---------------------------------------------------------------------------
# orbit tables
# ---------------------------------------------------------------------------


def all_tuples(n: int, length: int) -> np.ndarray:
    """Every tuple in ``[n]^length``, lexicographic order, shape ``(n**length, length)``."""
    if length == 0:
        return np.zeros((1, 0), dtype=np.int64)
    return np.indices((n,) * length).reshape(length, -1).T.astype(np.int64)


def _flat(tuples: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(len(tuples), dtype=np.int64)
    for j in range(tuples.shape[1]):
        out = out * n + tuples[:, j]
    return out


@dataclass(frozen=True, eq=False)
class OrbitTable:
    """Partition of ``[N]^k_out x [N]^k_in`` into orbits of the diagonal action.

    ``ids[q, p]`` is the orbit of the pair with flat output index ``q`` and flat
    input index ``p``.  Orbits are numbered by their lexicographically smallest
    member, which is also stored as the representative.
    """

    group: GroupSpec
    k_out: int
    k_in: int
    ids: np.ndarray
    representatives: tuple[tuple[int, ...], ...]
    types: tuple[tuple[int, ...], ...]

    @property
    def num_orbits(self) -> int:
        return len(self.representatives)

    @property
    def n_out(self) -> int:
        return self.ids.shape[0]

    @property
    def n_in(self) -> int:
        return self.ids.shape[1]

    def orbit_id(self, q: Sequence[int], p: Sequence[int]) -> int:
        n = self.group.degree
        if len(q) != self.k_out or len(p) != self.k_in:
            raise GroupError("tuple lengths do not match the table orders")
        qi = int(_flat(np.asarray([q], dtype=np.int64).reshape(1, -1), n)[0]) if q else 0
        pi = int(_flat(np.asarray([p], dtype=np.int64).reshape(1, -1), n)[0]) if p else 0
        return int(self.ids[qi, pi])

    def representative_pair(self, h: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
        r = self.representatives[h]
        return r[: self.k_out], r[self.k_out:]

    def counts(self) -> np.ndarray:
        """``counts[q, h]``: number of inputs ``p`` with ``(q, p)`` in orbit ``h``."""
        out = np.zeros((self.n_out, self.num_orbits), dtype=np.int64)
        rows = np.repeat(np.arange(self.n_out), self.n_in)
        np.add.at(out, (rows, self.ids.ravel()), 1)
        return out

    def row_counts(self) -> np.ndarray:
        """Members per output row of each orbit (constant over the rows it meets)."""
        c = self.counts()
        return c.max(axis=0)

    def diagonal_orbits(self) -> list[int]:
        """Orbits made of pairs ``(q, q)``; empty unless ``k_out == k_in``."""
        if self.k_out != self.k_in:
            return []
        return sorted(set(int(v) for v in np.diagonal(self.ids)))

    def to_dict(self) -> dict:
        return {
            "group": str(self.group),
            "k_out": self.k_out,
            "k_in": self.k_in,
            "num_orbits": self.num_orbits,
            "representatives": [list(r) for r in self.representatives],
            "types": [list(t) for t in self.types],
        }


def enumerate_orbits(group: GroupSpec, k_out: int, k_in: int,
                     budget: int = DEFAULT_BUDGET) -> OrbitTable:
    """Orbit table of ``[N]^k_out x [N]^k_in`` under the diagonal action of ``group``."""
    if k_out < 0 or k_in < 0:
        raise GroupError("tensor orders must be non-negative")
    n, length = group.degree, k_out + k_in
    total = n**length
    if group.is_family:
        tuples = all_tuples(n, length)
        keys = group.type_keys(tuples)
        if keys.shape[1] == 0:
            inverse = np.zeros(total, dtype=np.int64)
            first = np.array([0])
        else:
            _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
            inverse = inverse.ravel()
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        ids = rank[inverse]
        reps_idx = first[order]
        types = [tuple(int(v) for v in keys[i]) for i in reps_idx] if keys.shape[1] else [()]
    else:
        if total > budget:
            raise BudgetExceeded(
                f"{total} tuple pairs exceed the enumeration budget of {budget}"
            )
        tuples = all_tuples(n, length)
        labels = _closure_labels(group, tuples)
        uniq, ids = np.unique(labels, return_inverse=True)
        ids = ids.ravel()
        reps_idx = uniq
        types = [tuple(int(v) for v in tuples[i]) for i in reps_idx]
    reps = tuple(tuple(int(v) for v in tuples[i]) for i in reps_idx)
    ids = ids.reshape(n**k_out, n**k_in).astype(np.int64)
    ids.flags.writeable = False
    return OrbitTable(group, k_out, k_in, ids, reps, tuple(types))


def _closure_labels(group: GroupSpec, tuples: np.ndarray) -> np.ndarray:
    """Label every tuple with the smallest flat index in its orbit.

    Breadth-first closure done for all orbits at once: labels flow along
    generator edges (both directions) until stable, with pointer jumping to
    shorten long chains.
    """
    n = group.degree
    labels = np.arange(len(tuples), dtype=np.int64)
    images = [_flat(g.as_array()[tuples], n) for g in group.generators()]
    if not images or tuples.shape[1] == 0:
        return labels
    while True:
        before = labels.copy()
        for img in images:
            np.minimum(labels, labels[img], out=labels)
            labels[img] = np.minimum(labels[img], labels)
        while True:
            jumped = labels[labels]
            if np.array_equal(jumped, labels):
                break
            labels = jumped
        if np.array_equal(before, labels):
            return labels


def stabilizer_orbit_count(group: GroupSpec, q: int, budget: int = DEFAULT_BUDGET) -> int:
    """Number of classes of ``[N]`` under the stabilizer of point ``q``.

    Orbits of ``Stab(q)`` on ``[N]`` are in bijection with the pair-orbits
    ``(q, p)``, so this is the number of distinct orbit ids in row ``q``.
    """
    if not 0 <= q < group.degree:
        raise GroupError(f"point {q} outside [0, {group.degree})")
    table = enumerate_orbits(group, 1, 1, budget=budget)
    return int(len(np.unique(table.ids[q])))


def position_permutation(sigma: Permutation, k: int) -> np.ndarray:
    """Induced permutation on flat ``k``-tuple positions: ``out[flat(t)] = flat(sigma(t))``."""
    n = sigma.n
    t = all_tuples(n, k)
    return _flat(sigma.as_array()[t], n)


def act(sigma: Permutation, x: np.ndarray, k: int = 1) -> np.ndarray:
    """Group action on data of shape ``(batch, N**k, d)``: ``(sigma.x)_{sigma(t)} = x_t``."""
    perm = position_permutation(sigma, k)
    if x.shape[-2] != len(perm):
        raise GroupError(f"data has {x.shape[-2]} positions, expected {len(perm)}")
    out = np.empty_like(x)
    out[..., perm, :] = x
    return out


def find_element(group: GroupSpec, src: Sequence[int], dst: Sequence[int],
                 budget: int = DEFAULT_BUDGET) -> Permutation | None:
    """A group element mapping tuple ``src`` to ``dst`` (BFS over the tuple orbit)."""
    src, dst = tuple(src), tuple(dst)
    if len(src) != len(dst):
        raise GroupError("tuples differ in length")
    start = Permutation.identity(group.degree)
    gens = group.generators()
    seen = {src: start}
    queue = deque([src])
    while queue:
        t = queue.popleft()
        if t == dst:
            return seen[t]
        for g in gens:
            u = act_on_tuple(g, t)
            if u not in seen:
                if len(seen) >= budget:
                    raise BudgetExceeded(f"orbit search exceeded budget of {budget}")
                seen[u] = compose(g, seen[t])
                queue.append(u)
    return None


def group_elements(group: GroupSpec, limit: int = 100_000) -> list[Permutation]:
    """All elements by closure under the generators (small groups only)."""
    ident = Permutation.identity(group.degree)
    seen = {ident.mapping: ident}
    queue = deque([ident])
    gens = group.generators()
    while queue:
        a = queue.popleft()
        for g in gens:
            b = compose(g, a)
            if b.mapping not in seen:
                if len(seen) >= limit:
                    raise BudgetExceeded(f"group has more than {limit} elements")
                seen[b.mapping] = b
                queue.append(b)
    return list(seen.values())


def iter_orbit_members(table: OrbitTable, h: int):
    qs, ps = np.nonzero(table.ids == h)
    return zip(qs.tolist(), ps.tolist())


__all__ = [
    "BudgetExceeded", "Cyclic", "DEFAULT_BUDGET", "DirectProduct", "Generated",
    "GroupError", "GroupSpec", "OrbitTable", "Permutation", "Symmetric", "Trivial",
    "act", "act_on_tuple", "all_tuples", "compose", "enumerate_orbits",
    "find_element", "group_elements", "parse_group", "position_permutation",
    "stabilizer_orbit_count",
]
