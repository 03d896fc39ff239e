"""Binary regression trees, their dummy (leaf indicator) representation, and
birth/death proposals.

Leaf order matters: column ``j`` of the dummy matrix ``D`` and entry ``j``
of the leaf-mean vector both refer to ``tree.leaves[j]``.  Trees built by
hand list leaves left to right; the sampler keeps the order stable under
birth (left child takes the parent's slot, right child is appended) and
death (the appended slot is removed), so a birth followed by the matching
death restores the original layout exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Node",
    "Tree",
    "DummyDesign",
    "Proposal",
    "ProposalError",
    "build_dummy",
    "reorder",
    "cutpoint_grid",
    "split_probability",
    "propose",
    "apply_proposal",
]


class ProposalError(RuntimeError):
    """No valid birth exists for the current tree."""


class Node:
    __slots__ = ("var", "cut", "left", "right", "parent", "depth", "mu", "_cut_range")

    def __init__(self, depth=0, parent=None, mu=0.0):
        self.var = -1
        self.cut = math.nan
        self.left = None
        self.right = None
        self.parent = parent
        self.depth = depth
        self.mu = mu
        self._cut_range = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    @property
    def is_nog(self) -> bool:
        """Internal node whose two children are both leaves."""
        return not self.is_leaf and self.left.is_leaf and self.right.is_leaf

    def __repr__(self):
        if self.is_leaf:
            return f"Leaf(mu={self.mu:.4g}, depth={self.depth})"
        return f"Split(x{self.var} <= {self.cut:.4g}, depth={self.depth})"


class Tree:
    """A binary decision tree with one mean per leaf.

    ``Tree.from_spec`` builds a tree from nested tuples
    ``(var, cut, left, right)`` with floats for leaf means, e.g.
    ``(0, 0.5, (1, 0.5, 1.0, 2.0), 3.0)``.
    """

    def __init__(self, root: Node | None = None):
        self.root = Node() if root is None else root
        self.leaves = self._collect_leaves(self.root)
        self._flat = None  # structure arrays of flatten(), reset when the shape changes

    @staticmethod
    def _collect_leaves(node):
        if node.is_leaf:
            return [node]
        return Tree._collect_leaves(node.left) + Tree._collect_leaves(node.right)

    @classmethod
    def from_spec(cls, spec) -> "Tree":
        def build(s, depth, parent):
            node = Node(depth, parent)
            if isinstance(s, tuple):
                var, cut, left, right = s
                node.var, node.cut = int(var), float(cut)
                node.left = build(left, depth + 1, node)
                node.right = build(right, depth + 1, node)
            else:
                node.mu = float(s)
            return node

        return cls(build(spec, 0, None))

    def to_spec(self):
        def walk(node):
            if node.is_leaf:
                return node.mu
            return (node.var, node.cut, walk(node.left), walk(node.right))

        return walk(self.root)

    @property
    def b(self) -> int:
        return len(self.leaves)

    @property
    def leaf_means(self) -> np.ndarray:
        return np.array([leaf.mu for leaf in self.leaves])

    @leaf_means.setter
    def leaf_means(self, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (self.b,):
            raise ValueError(f"expected {self.b} leaf means, got shape {values.shape}")
        for leaf, v in zip(self.leaves, values):
            leaf.mu = float(v)

    def nodes(self):
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            if not node.is_leaf:
                stack.extend((node.right, node.left))

    def nog_nodes(self) -> list:
        """Internal nodes with two leaf children, in the order of their left child in ``leaves``."""
        out = []
        for leaf in self.leaves:
            p = leaf.parent
            if p is not None and p.left is leaf and p.right.left is None:
                out.append(p)
        return out

    @property
    def depth(self) -> int:
        return max(leaf.depth for leaf in self.leaves)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf position of every row of ``X``."""
        X = np.asarray(X)
        out = np.empty(len(X), dtype=np.int64)
        pos = {id(leaf): j for j, leaf in enumerate(self.leaves)}
        stack = [(self.root, np.arange(len(X)))]
        while stack:
            node, idx = stack.pop()
            if node.is_leaf:
                out[idx] = pos[id(node)]
                continue
            go_left = X[idx, node.var] <= node.cut
            stack.append((node.left, idx[go_left]))
            stack.append((node.right, idx[~go_left]))
        return out

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.leaf_means[self.apply(X)]

    def copy(self) -> "Tree":
        return Tree.from_spec(self.to_spec())

    def flatten(self):
        """Array form ``(var, cut, left, right, mu)`` in preorder.

        Leaves have var = -1; ``mu`` is zero at internal nodes.  The first
        four arrays are cached until the tree's shape changes and are
        returned read-only.
        """
        if self._flat is None:
            var, cut, left, right, leaf_rows, leaves = [], [], [], [], [], []

            def walk(node):
                k = len(var)
                var.append(node.var)
                cut.append(node.cut)
                left.append(-1)
                right.append(-1)
                if node.is_leaf:
                    leaf_rows.append(k)
                    leaves.append(node)
                else:
                    left[k] = walk(node.left)
                    right[k] = walk(node.right)
                return k

            walk(self.root)
            arrays = (np.array(var, dtype=np.int32), np.array(cut), np.array(left, dtype=np.int32),
                      np.array(right, dtype=np.int32))
            for a in arrays:
                a.flags.writeable = False
            self._flat = arrays + (np.array(leaf_rows, dtype=np.int64), leaves)
        var, cut, left, right, leaf_rows, leaves = self._flat
        mu = np.zeros(len(var))
        mu[leaf_rows] = [leaf.mu for leaf in leaves]
        return var, cut, left, right, mu

    def __repr__(self):
        return f"Tree(b={self.b}, depth={self.depth})"


@dataclass
class DummyDesign:
    """Leaf membership of every observation.

    ``assignment[i] = j`` means row ``i`` of ``D`` has its single one in
    column ``j``; ``omega[j]`` lists (0-based, sorted) the rows mapped to
    leaf ``j``.
    """

    assignment: np.ndarray
    b: int
    omega: list = field(default=None, repr=False)

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.omega is None:
            order = np.argsort(self.assignment, kind="stable")
            bounds = np.searchsorted(self.assignment[order], np.arange(self.b + 1))
            self.omega = [order[bounds[j]:bounds[j + 1]] for j in range(self.b)]

    @property
    def n(self) -> int:
        return len(self.assignment)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.b)

    def matrix(self) -> np.ndarray:
        d = np.zeros((self.n, self.b))
        d[np.arange(self.n), self.assignment] = 1.0
        return d


def build_dummy(tree: Tree, X: np.ndarray) -> DummyDesign:
    """Route each row of ``X`` to its leaf, giving ``g(X; T, M) = D mu``."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError("X must be 2-D")
    used = [node.var for node in tree.nodes() if not node.is_leaf]
    if used and (min(used) < 0 or max(used) >= X.shape[1]):
        raise ValueError("tree splits on a variable outside X")
    return DummyDesign(tree.apply(X), tree.b)


def reorder(design: DummyDesign):
    """Permutation to leaf-contiguous order.

    Returns ``(perm, P, D_P)`` with ``D = P @ D_P`` and ``P.T @ D = D_P``;
    ``perm`` is the row order, i.e. ``D_P = D[perm]``, ``R_P = R[perm]`` and
    ``Sigma_P = Sigma[perm][:, perm]``.
    """
    perm = np.argsort(design.assignment, kind="stable")
    n = design.n
    p_mat = np.zeros((n, n))
    p_mat[perm, np.arange(n)] = 1.0
    return perm, p_mat, design.matrix()[perm]


def cutpoint_grid(X: np.ndarray) -> list:
    """Midpoints between consecutive sorted unique values, per covariate."""
    X = np.asarray(X, dtype=float)
    grid = []
    for col in X.T:
        u = np.unique(col)
        grid.append(0.5 * (u[1:] + u[:-1]))
    return grid


def split_probability(depth: int, alpha: float, beta: float) -> float:
    """Prior probability that a node at ``depth`` is internal."""
    return alpha * (1.0 + depth) ** (-beta)


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


@dataclass
class Proposal:
    """A birth or death move together with its Metropolis-Hastings terms.

    ``fine`` / ``coarse`` are the designs with ``b + 1`` / ``b`` leaves for a
    birth at a leaf with ``b`` leaves (and ``b`` / ``b - 1`` for a death);
    ``merge_map[j]`` is the coarse leaf containing fine leaf ``j``.
    ``split_pos`` is the coarse slot that is split (birth) or recreated
    (death) and ``new_pos`` the fine slot of the right child.
    """

    kind: str
    node: Node
    var: int
    cut: float
    current: DummyDesign
    resulting: DummyDesign
    merge_map: np.ndarray
    split_pos: int
    new_pos: int
    left_idx: np.ndarray
    right_idx: np.ndarray
    log_kernel_ratio: float
    log_prior_ratio: float

    @property
    def fine(self) -> DummyDesign:
        return self.resulting if self.kind == "birth" else self.current

    @property
    def coarse(self) -> DummyDesign:
        return self.current if self.kind == "birth" else self.resulting

    @property
    def kernel_ratio(self) -> float:
        return math.exp(self.log_kernel_ratio)

    @property
    def prior_ratio(self) -> float:
        return math.exp(self.log_prior_ratio)


def _cut_range(node: Node, idx: np.ndarray, X: np.ndarray, grid: list):
    """Per-variable half-open index range of grid cuts splitting ``idx`` in two."""
    if node._cut_range is None:
        sub = X[idx]
        lo = np.empty(X.shape[1], dtype=np.int64)
        hi = np.empty(X.shape[1], dtype=np.int64)
        if len(idx) < 2:
            lo[:] = hi[:] = 0
        else:
            mins, maxs = sub.min(axis=0), sub.max(axis=0)
            for v, g in enumerate(grid):
                lo[v] = np.searchsorted(g, mins[v], side="right")
                hi[v] = np.searchsorted(g, maxs[v], side="left")
        node._cut_range = (lo, hi, bool(np.any(hi > lo)))
    return node._cut_range


def _splittable(node, idx, X, grid) -> bool:
    return _cut_range(node, idx, X, grid)[2]


def _birth_prob(b: int) -> float:
    return 1.0 if b == 1 else 0.5


def propose(tree: Tree, design: DummyDesign, X: np.ndarray, rng: np.random.Generator,
            grid: list | None = None, alpha: float = 0.95, beta: float = 2.0,
            max_retries: int = 20) -> Proposal:
    """Draw a birth or death proposal for ``tree``.

    Birth (probability 1 when the tree is a single leaf, else 1/2) picks a
    leaf uniformly among leaves that admit a split, then a variable
    uniformly among those with a valid cut in that leaf, then a cut
    uniformly among the grid values strictly inside the leaf's range, so
    both children are nonempty.  Death picks uniformly among internal nodes
    whose children are both leaves.

    The returned log kernel ratio ``q(T*, T) / q(T, T*)`` and log prior ratio
    ``p(T*) / p(T)`` omit the split-rule probabilities, which appear in both
    and cancel.  Raises :class:`ProposalError` when a birth is drawn but no
    leaf can be split (the move then counts as rejected).
    """
    if grid is None:
        grid = cutpoint_grid(X)
    b = tree.b
    if rng.random() < _birth_prob(b):
        return _propose_birth(tree, design, X, rng, grid, alpha, beta, max_retries)
    return _propose_death(tree, design, X, rng, grid, alpha, beta)


def _propose_birth(tree, design, X, rng, grid, alpha, beta, max_retries):
    b = tree.b
    ok = [j for j, leaf in enumerate(tree.leaves) if _splittable(leaf, design.omega[j], X, grid)]
    if not ok:
        raise ProposalError("no leaf admits a valid split")
    for _ in range(max_retries):
        k = ok[rng.integers(len(ok))]
        leaf = tree.leaves[k]
        lo, hi, _ = _cut_range(leaf, design.omega[k], X, grid)
        good_vars = np.flatnonzero(hi > lo)
        var = int(good_vars[rng.integers(len(good_vars))])
        cut = float(grid[var][rng.integers(lo[var], hi[var])])
        idx = design.omega[k]
        go_left = X[idx, var] <= cut
        left_idx, right_idx = idx[go_left], idx[~go_left]
        if len(left_idx) and len(right_idx):
            break
    else:  # pragma: no cover - unreachable with grid cuts strictly inside the range
        raise ProposalError("retry cap exhausted")

    assignment = design.assignment.copy()
    assignment[right_idx] = b
    omega = list(design.omega)
    omega[k] = left_idx
    omega.append(right_idx)
    fine = DummyDesign(assignment, b + 1, omega)
    merge_map = np.append(np.arange(b), k)

    parent = leaf.parent
    n_nog_new = len(tree.nog_nodes()) + 1 - (1 if parent is not None and parent.is_nog else 0)
    log_kernel = (_log(0.5) - _log(n_nog_new)) - (_log(_birth_prob(b)) - _log(len(ok)))
    d = leaf.depth
    p_here = split_probability(d, alpha, beta)
    p_child = split_probability(d + 1, alpha, beta)
    log_prior = _log(p_here) + 2.0 * _log(1.0 - p_child) - _log(1.0 - p_here)
    return Proposal("birth", leaf, var, cut, design, fine, merge_map, k, b,
                    left_idx, right_idx, log_kernel, log_prior)


def _propose_death(tree, design, X, rng, grid, alpha, beta):
    b = tree.b
    nogs = tree.nog_nodes()
    node = nogs[rng.integers(len(nogs))]
    pos = {id(leaf): j for j, leaf in enumerate(tree.leaves)}
    kl, kr = pos[id(node.left)], pos[id(node.right)]
    left_idx, right_idx = design.omega[kl], design.omega[kr]

    # coarse layout: parent takes the left child's slot, right slot is removed
    merge_map = np.arange(b)
    merge_map[kr] = kl
    merge_map[kr + 1:] -= 1
    keep = merge_map[kl]
    assignment = merge_map[design.assignment]
    merged = np.sort(np.concatenate((left_idx, right_idx)))
    omega = [o for j, o in enumerate(design.omega) if j != kr]
    omega[keep] = merged
    coarse = DummyDesign(assignment, b - 1, omega)

    n_split_now = sum(_splittable(leaf, design.omega[j], X, grid) for j, leaf in enumerate(tree.leaves))
    n_split_new = (n_split_now + 1 - _splittable(node.left, left_idx, X, grid)
                   - _splittable(node.right, right_idx, X, grid))
    n_nog_now = len(nogs)
    log_kernel = (_log(_birth_prob(b - 1)) - _log(n_split_new)) - (_log(0.5) - _log(n_nog_now))
    d = node.depth
    p_here = split_probability(d, alpha, beta)
    p_child = split_probability(d + 1, alpha, beta)
    log_prior = _log(1.0 - p_here) - _log(p_here) - 2.0 * _log(1.0 - p_child)
    return Proposal("death", node, node.var, node.cut, design, coarse, merge_map, keep, kr,
                    left_idx, right_idx, log_kernel, log_prior)


def apply_proposal(tree: Tree, proposal: Proposal) -> DummyDesign:
    """Mutate ``tree`` according to an accepted proposal; returns the new design."""
    node = proposal.node
    tree._flat = None
    if proposal.kind == "birth":
        node.var, node.cut = proposal.var, proposal.cut
        node.left = Node(node.depth + 1, node, node.mu)
        node.right = Node(node.depth + 1, node, node.mu)
        node._cut_range = None
        tree.leaves[proposal.split_pos] = node.left
        tree.leaves.append(node.right)
    else:
        del tree.leaves[proposal.new_pos]
        tree.leaves[proposal.split_pos] = node
        node.mu = 0.5 * (node.left.mu + node.right.mu)
        node.left = node.right = None
        node.var, node.cut = -1, math.nan
    return proposal.resulting
