"""Multi-stage transformation search by iterative gain competition.

A circuit holds an ordered list of stages, each wrapping a family of
candidate transformations with a gain per candidate. Every iteration runs
a backward pass (adjoint transforms of the target, aggregated per stage),
a forward pass (each live transform of the source-side aggregate, scored
against the neighboring backward aggregate), and a competition step that
decays the gains of below-max candidates. Cost per iteration is additive
in the stage sizes: each live transform is applied at most once per
direction.

The engine is agnostic to grid kind; stages may even change kind (a family
can map 2D fields to 3D fields) as long as consecutive shapes chain.
Circuits share nothing mutable, so independent circuits are safe to run
concurrently.
"""

from __future__ import annotations

import numpy as np

from .fields import SparseField, superpose

__all__ = [
    "RUNNING",
    "CONVERGED",
    "NO_SOLUTION",
    "MAX_ITERATIONS",
    "AggregationPolicy",
    "TransformFamily",
    "DisplacementFamily",
    "Stage",
    "Circuit",
    "competition_update",
    "aggregate",
    "objective_value",
    "OracleBudgetError",
    "exhaustive_argmax",
]

RUNNING = "running"
CONVERGED = "converged"
NO_SOLUTION = "no_solution"
MAX_ITERATIONS = "max_iterations"


class AggregationPolicy:
    """How a stage combines its gain-weighted transform outputs.

    p=None is plain superposition; p >= 1 applies an elementwise Lp
    combination. p=1 and superposition coincide exactly on nonnegative
    fields.
    """

    __slots__ = ("p",)

    def __init__(self, p=None):
        if p is not None and float(p) < 1.0:
            raise ValueError("lp aggregation requires p >= 1")
        self.p = None if p is None else float(p)

    @classmethod
    def superposition(cls):
        return cls(None)

    @classmethod
    def lp_norm(cls, p):
        return cls(p)

    @property
    def is_superposition(self):
        return self.p is None

    def __repr__(self):
        return "superposition" if self.p is None else f"lp(p={self.p})"


def aggregate(shape, terms, policy=None):
    """Combine (gain, field) terms under the given aggregation policy."""
    p = None if policy is None else policy.p
    return superpose(shape, terms, p=p)


# --------------------------------------------------------------------------
# transform families
# --------------------------------------------------------------------------


class TransformFamily:
    """Ordered family of transformations with exact adjoints.

    Subclasses implement apply / apply_adjoint so that for every index j,
    unit impulse e and field y: dot(apply(j, e), y) == dot(e, apply_adjoint(j, y)).
    in_shape is the grid of forward inputs, out_shape of forward outputs
    (they differ only for kind-bridging families).
    """

    def __init__(self, in_shape, out_shape, size):
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)
        self._size = int(size)
        if self._size < 1:
            raise ValueError("a transform family needs at least one member")

    def __len__(self):
        return self._size

    def apply(self, j, field):
        raise NotImplementedError

    def apply_adjoint(self, j, field):
        raise NotImplementedError

    def describe(self, j):
        """Human-meaningful parameter of member j (offset, angle, ...)."""
        return int(j)


class DisplacementFamily(TransformFamily):
    """Transforms that move every cell by a fixed integer offset.

    Used for 2D shifts and for 3D segment-orientation displacements. The
    adjoint is the negated offset; out-of-bounds targets are dropped, so
    total weight is conserved exactly for interior-supported fields.
    """

    def __init__(self, shape, offsets, labels=None):
        offsets = np.atleast_2d(np.asarray(offsets, dtype=np.int64))
        super().__init__(shape, shape, offsets.shape[0])
        if offsets.shape[1] != len(shape):
            raise ValueError("offset dimensionality does not match the grid")
        self.offsets = offsets
        self.labels = labels
        self._stride = np.ones(len(shape), dtype=np.int64)
        for i in range(len(shape) - 2, -1, -1):
            self._stride[i] = self._stride[i + 1] * shape[i + 1]

    def _shift(self, field, off):
        if field.shape != self.in_shape:
            raise ValueError(f"field grid {field.shape} does not match family grid {self.in_shape}")
        if field.is_empty():
            return SparseField.empty(self.in_shape)
        coords = field.coords()
        moved = coords + off
        keep = np.ones(len(field), dtype=bool)
        for ax, n in enumerate(self.in_shape):
            keep &= (moved[:, ax] >= 0) & (moved[:, ax] < n)
        delta = int(np.dot(off, self._stride))
        # adding a constant preserves sorted order of the linear indices
        return SparseField(self.in_shape, field.lin[keep] + delta, field.w[keep])

    def apply(self, j, field):
        return self._shift(field, self.offsets[j])

    def apply_adjoint(self, j, field):
        return self._shift(field, -self.offsets[j])

    def describe(self, j):
        if self.labels is not None:
            return self.labels[j]
        return tuple(int(v) for v in self.offsets[j])


# --------------------------------------------------------------------------
# stages and competition
# --------------------------------------------------------------------------


class Stage:
    """One circuit layer: a transform family plus its competition state.

    gains start at 1.0 and only ever decrease; scores hold the current
    iteration's per-transform match values. An optional mask multiplies
    this stage's forward aggregate and the backward aggregate arriving
    from the stage above. groups optionally partitions the indices into
    independently competing subsets (competition and convergence then run
    per group); the default is a single group spanning the family.
    """

    def __init__(self, family, rate=0.1, mask=None, groups=None, label=None):
        if rate <= 0:
            raise ValueError("competition rate must be positive")
        self.family = family
        self.rate = float(rate)
        self.label = label
        self.set_mask(mask)
        n = len(family)
        if groups is None:
            self.groups = np.zeros(n, dtype=np.int64)
        else:
            self.groups = np.asarray(groups, dtype=np.int64)
            if self.groups.shape != (n,):
                raise ValueError("groups must assign one group id per transform")
        self.group_ids = np.unique(self.groups)
        self.gains = np.ones(n, dtype=np.float64)
        self.scores = np.zeros(n, dtype=np.float64)

    def set_mask(self, mask):
        if mask is not None:
            if mask.w.size and float(mask.w.max()) > 1.0 + 1e-12:
                raise ValueError("mask values must lie in [0, 1]")
        self.mask = mask

    def live(self):
        return np.flatnonzero(self.gains > 0.0)

    def live_count(self):
        return int(np.count_nonzero(self.gains > 0.0))

    def winners(self):
        """Surviving index per group; only meaningful once each group has one."""
        out = {}
        for gid in self.group_ids:
            idx = np.flatnonzero((self.groups == gid) & (self.gains > 0.0))
            out[int(gid)] = [int(i) for i in idx]
        return out

    def __repr__(self):
        name = self.label or type(self.family).__name__
        return f"Stage({name}, n={len(self.family)}, live={self.live_count()})"


def competition_update(scores, gains, rate, zero_threshold=1e-3, groups=None):
    """One gain-competition step; returns the updated gain vector.

    Within each group: if the group's max score is positive, every gain
    decays by rate * (1 - score/max) and the argmax gain is unchanged;
    gains are clamped at zero and snapped to zero below zero_threshold.
    A group whose scores are all zero collapses to all-zero gains.
    """
    scores = np.asarray(scores, dtype=np.float64)
    g = np.asarray(gains, dtype=np.float64).copy()
    if groups is None:
        groups = np.zeros(scores.size, dtype=np.int64)
    for gid in np.unique(groups):
        sel = groups == gid
        top = scores[sel].max() if np.any(sel) else 0.0
        if top <= 0.0:
            g[sel] = 0.0
            continue
        delta = -rate * (1.0 - scores[sel] / top)
        updated = np.maximum(g[sel] + delta, 0.0)
        updated[updated < zero_threshold] = 0.0
        g[sel] = updated
    return g


# --------------------------------------------------------------------------
# circuit
# --------------------------------------------------------------------------


class Circuit:
    """Ordered stages between a forward source field and a backward target.

    The source is the pattern being transformed stage by stage toward the
    target's frame; the target feeds the adjoint path. run() iterates to
    convergence (exactly one surviving gain per stage group), no_solution
    (some group fully extinguished), or the iteration cap.
    """

    def __init__(self, stages, source, target, *, policy=None,
                 zero_threshold=1e-3, max_iterations=200, stall_window=10,
                 trace=False):
        if not stages:
            raise ValueError("a circuit needs at least one stage")
        shape = source.shape
        for i, st in enumerate(stages):
            if st.family.in_shape != shape:
                raise ValueError(
                    f"stage {i} expects grid {st.family.in_shape}, got {shape}")
            shape = st.family.out_shape
        if shape != target.shape:
            raise ValueError(
                f"target grid {target.shape} does not match final stage grid {shape}")
        self.stages = list(stages)
        self.source = source
        self.target = target
        self.policy = policy or AggregationPolicy.superposition()
        self.zero_threshold = float(zero_threshold)
        self.max_iterations = int(max_iterations)
        self.stall_window = int(stall_window)
        self.status = RUNNING
        self.iteration = 0
        self.degenerate = False
        self.cost_log = []
        self.trace = [] if trace else None
        self._stall_count = 0
        self._applies = 0
        m = len(self.stages)
        self.forward_agg = [None] * m   # masked forward aggregate per stage
        self.backward_agg = [None] * m  # backward aggregate produced by stage s
        self._target_eff = None

    # ------------------------------------------------------------- plumbing

    @property
    def total_family_size(self):
        return sum(len(st.family) for st in self.stages)

    def live_counts(self):
        return [st.live_count() for st in self.stages]

    def set_inputs(self, source=None, target=None):
        """Swap the source/target fields between iterations.

        Used by coupled pipelines that refresh one circuit's inputs from
        another's state; gains are untouched.
        """
        if source is not None:
            if source.shape != self.stages[0].family.in_shape:
                raise ValueError("source grid does not match stage 0")
            self.source = source
        if target is not None:
            if target.shape != self.stages[-1].family.out_shape:
                raise ValueError("target grid does not match final stage")
            self.target = target

    def _masked_target(self):
        last = self.stages[-1]
        if last.mask is not None:
            # an end-stage mask must bind on the backward input, or an
            # end-effector constraint would never influence competition
            return self.target.mul(last.mask)
        return self.target

    def _apply(self, family, j, field, adjoint):
        self._applies += 1
        return family.apply_adjoint(j, field) if adjoint else family.apply(j, field)

    # ---------------------------------------------------------------- passes

    def backward_pass(self):
        """Top-down adjoint aggregates for stages m..2; stage 1 is skipped."""
        prev = self._masked_target()
        self._target_eff = prev
        for s in range(len(self.stages) - 1, 0, -1):
            st = self.stages[s]
            terms = [
                (st.gains[j], self._apply(st.family, j, prev, adjoint=True))
                for j in st.live()
            ]
            agg = aggregate(st.family.in_shape, terms, self.policy)
            below = self.stages[s - 1]
            if below.mask is not None:
                agg = agg.mul(below.mask)
            self.backward_agg[s] = agg
            prev = agg

    def forward_pass(self):
        """Bottom-up transform, score and aggregate for every stage.

        Each live transform is applied exactly once and reused for both its
        score and its contribution to the stage aggregate; dead transforms
        keep score 0 and are never evaluated.
        """
        m = len(self.stages)
        prev = self.source
        for s in range(m):
            st = self.stages[s]
            back = self.backward_agg[s + 1] if s + 1 < m else self._target_eff
            st.scores = np.zeros(len(st.family), dtype=np.float64)
            terms = []
            for j in st.live():
                tau = self._apply(st.family, j, prev, adjoint=False)
                st.scores[j] = back.dot(tau)
                terms.append((st.gains[j], tau))
            agg = aggregate(st.family.out_shape, terms, self.policy)
            if st.mask is not None:
                agg = agg.mul(st.mask)
            self.forward_agg[s] = agg
            prev = agg

    def update_gains(self):
        for st in self.stages:
            st.gains = competition_update(
                st.scores, st.gains, st.rate, self.zero_threshold, st.groups)

    # ------------------------------------------------------------- iteration

    def iterate(self):
        """One full backward/forward/competition round plus termination check."""
        if self.status != RUNNING:
            return self.status
        self._applies = 0
        before = [st.gains.copy() for st in self.stages]
        self.backward_pass()
        self.forward_pass()
        self.update_gains()
        self.iteration += 1
        self.cost_log.append(self._applies)
        if self._applies > 2 * self.total_family_size:
            raise RuntimeError("additive cost bound violated: "
                               f"{self._applies} > 2*{self.total_family_size}")
        if self.trace is not None:
            self.trace.append({
                "scores": [st.scores.copy() for st in self.stages],
                "gains": [st.gains.copy() for st in self.stages],
            })
        changed = any(
            not np.array_equal(b, st.gains) for b, st in zip(before, self.stages)
        )
        self._stall_count = 0 if changed else self._stall_count + 1
        self._check_termination()
        return self.status

    def _check_termination(self):
        counts = []
        for st in self.stages:
            for gid in st.group_ids:
                counts.append(int(np.count_nonzero(
                    (st.groups == gid) & (st.gains > 0.0))))
        if any(c == 0 for c in counts):
            self.status = NO_SOLUTION
            return
        if all(c == 1 for c in counts):
            self.status = CONVERGED
            return
        if self._stall_count >= self.stall_window:
            # competition has stalled on exact ties; collapse the first
            # still-ambiguous group to its lowest surviving index and let
            # the remaining stages re-equilibrate before collapsing more
            self._collapse_one_group()
            self.degenerate = True
            self._stall_count = 0
            self._check_termination()

    def _collapse_one_group(self):
        for st in self.stages:
            for gid in st.group_ids:
                idx = np.flatnonzero((st.groups == gid) & (st.gains > 0.0))
                if idx.size > 1:
                    keep = idx[0]
                    kept = st.gains[keep]
                    st.gains[st.groups == gid] = 0.0
                    st.gains[keep] = kept
                    return

    def run(self, max_iterations=None):
        cap = self.max_iterations if max_iterations is None else int(max_iterations)
        while self.status == RUNNING and self.iteration < cap:
            self.iterate()
        if self.status == RUNNING:
            self.status = MAX_ITERATIONS
        return self.status

    # ------------------------------------------------------------- solution

    def solution_indices(self):
        """Winning index per stage (per group for grouped stages)."""
        if self.status != CONVERGED:
            raise RuntimeError(f"no solution available (status {self.status})")
        out = []
        for st in self.stages:
            winners = st.winners()
            if len(st.group_ids) == 1:
                out.append(winners[int(st.group_ids[0])][0])
            else:
                out.append({gid: idx[0] for gid, idx in winners.items()})
        return out


# --------------------------------------------------------------------------
# objective and exhaustive oracle
# --------------------------------------------------------------------------


def objective_value(circuit):
    """Match value of the full gain-weighted composition, as a pure function
    of the current gains.

    Runs the backward aggregation all the way through stage 1 (which normal
    iterations skip) and correlates with the source. Under superposition
    aggregation each stage's score vector equals the gradient of this value
    with respect to that stage's gains.
    """
    if not circuit.policy.is_superposition:
        raise ValueError("objective is defined for superposition aggregation")
    prev = circuit._masked_target()
    for s in range(len(circuit.stages) - 1, -1, -1):
        st = circuit.stages[s]
        terms = [
            (st.gains[j], st.family.apply_adjoint(j, prev)) for j in st.live()
        ]
        agg = aggregate(st.family.in_shape, terms, circuit.policy)
        if s > 0:
            below = circuit.stages[s - 1]
            if below.mask is not None:
                agg = agg.mul(below.mask)
        prev = agg
    return circuit.source.dot(prev)


class OracleBudgetError(RuntimeError):
    """Exhaustive search refused: the composition count exceeds the budget."""

    def __init__(self, product, budget):
        super().__init__(
            f"exhaustive search over {product:.6g} compositions exceeds "
            f"budget {budget:.6g}")
        self.product = float(product)
        self.budget = float(budget)


def exhaustive_argmax(circuit, budget=10_000_000):
    """Brute-force argmax over every per-stage index composition.

    Scores each composition by forward-composing the source through the
    selected transforms (stage masks applied) and correlating with the
    target. Ties break to the lexicographically lowest index tuple. Refuses
    with OracleBudgetError when the composition product exceeds the budget.
    """
    sizes = [len(st.family) for st in circuit.stages]
    product = float(np.prod([float(n) for n in sizes]))
    if product > budget:
        raise OracleBudgetError(product, budget)
    best_idx = None
    best_score = -1.0
    for indices in np.ndindex(*sizes):
        v = circuit.source
        for st, j in zip(circuit.stages, indices):
            v = st.family.apply(j, v)
            if st.mask is not None:
                v = v.mul(st.mask)
            if v.is_empty():
                break
        score = v.dot(circuit.target) if not v.is_empty() else 0.0
        if score > best_score:
            best_score = score
            best_idx = tuple(int(i) for i in indices)
    return best_idx, float(best_score)
