"""Relaxed optimal-transport alignment between two sets of hidden states.

The exact transportation problem constrains both marginals; dropping the
target-side constraint admits a closed form in which every source row
sends all of its mass to its nearest target under cosine distance. The
relaxed distance lower-bounds the exact one, which the test-only
min-cost-flow oracle certifies. Masses come from normalized l1 norms of
the source rows; during training the plan is held constant in backward
(envelope subgradient), so gradient flows only into the target states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DimensionError, DomainError
from .tensor import Tensor, _make, _accum

EPS_COS = 1e-12

# forward-call counter, read by the trainer's loss-schedule instrumentation
CALLS = {"relaxed_ot": 0, "ot_loss": 0}


def cosine_cost(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise cosine distances, clipped into [0, 2]; zero rows cost 1."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise DimensionError(f"cosine_cost shapes {A.shape} vs {B.shape}")
    na = np.sqrt((A * A).sum(axis=1))
    nb = np.sqrt((B * B).sum(axis=1))
    sim = (A @ B.T) / (np.outer(na, nb) + EPS_COS)
    return np.clip(1.0 - sim, 0.0, 2.0)


def l1_masses(A: np.ndarray) -> np.ndarray:
    """Row importances: l1 norms normalized to sum 1."""
    A = np.asarray(A, dtype=np.float64)
    norms = np.abs(A).sum(axis=1)
    total = norms.sum()
    if total <= 0.0:
        raise DegenerateInputError("all-zero matrix has no mass distribution")
    return norms / total


def relaxed_ot(A: np.ndarray, B: np.ndarray) -> tuple[float, np.ndarray]:
    """Single-marginal OT: each source row transports all mass to its
    nearest target (ties to the lowest column). Returns (distance, plan)."""
    CALLS["relaxed_ot"] += 1
    masses = l1_masses(A)
    cost = cosine_cost(A, B)
    nearest = cost.argmin(axis=1)
    k, m = cost.shape
    plan = np.zeros((k, m))
    plan[np.arange(k), nearest] = masses
    distance = float((masses * cost[np.arange(k), nearest]).sum())
    return distance, plan


def independent_coupling_cost(
    A: np.ndarray, B: np.ndarray, masses_a: np.ndarray, masses_b: np.ndarray
) -> float:
    """Cost of the product coupling m (x) m'; feasible, hence an upper bound."""
    cost = cosine_cost(A, B)
    return float(masses_a @ cost @ masses_b)


def argmin_tie_gap(A: np.ndarray, B: np.ndarray) -> float:
    """Smallest per-row gap between the best and second-best target.

    Gradchecks require a positive gap: at a tie the argmin switches under
    perturbation and the envelope gradient is only a subgradient.
    """
    cost = cosine_cost(A, B)
    if cost.shape[1] < 2:
        return np.inf
    part = np.partition(cost, 1, axis=1)
    return float((part[:, 1] - part[:, 0]).min())


# ---------------------------------------------------------------------------
# training loss


def ot_loss(H_z: np.ndarray, H_zprime: Tensor) -> Tensor:
    """Relaxed OT distance as a differentiable scalar.

    H_z comes from the frozen encoder and is a plain array: masses and the
    plan are constants of the backward pass, and gradient reaches only the
    mapped states H_zprime.
    """
    CALLS["ot_loss"] += 1
    A = np.asarray(H_z, dtype=np.float64)
    B = H_zprime.data
    if A.shape[1] != B.shape[1]:
        raise DimensionError(f"ot_loss dims {A.shape} vs {B.shape}")
    masses = l1_masses(A)
    na = np.sqrt((A * A).sum(axis=1))
    nb = np.sqrt((B * B).sum(axis=1))
    sim = (A @ B.T) / (np.outer(na, nb) + EPS_COS)
    cost = 1.0 - sim
    clip_lo = cost < 0.0
    clip_hi = cost > 2.0
    cost = np.clip(cost, 0.0, 2.0)
    nearest = cost.argmin(axis=1)
    k = A.shape[0]
    rows = np.arange(k)
    distance = float((masses * cost[rows, nearest]).sum())

    def backward(g: np.ndarray) -> None:
        # d cost_ij / d B_j for the chosen pairs only, plan held constant
        grad_b = np.zeros_like(B)
        scale = g[0, 0]
        for i in range(k):
            j = int(nearest[i])
            if clip_lo[i, j] or clip_hi[i, j]:
                continue
            a, b = A[i], B[j]
            denom = na[i] * nb[j] + EPS_COS
            ds_db = a / denom - (sim[i, j] * na[i] / (nb[j] + EPS_COS)) * b / denom
            grad_b[j] -= scale * masses[i] * ds_db
        _accum(H_zprime, grad_b)

    return _make(np.array([[distance]]), (H_zprime,), backward)


# ---------------------------------------------------------------------------
# exact oracle (tests and ot-check only)

MAX_ORACLE_CELLS = 64


def exact_ot_oracle(
    A: np.ndarray,
    B: np.ndarray,
    masses_a: np.ndarray,
    masses_b: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Exact OT with both marginals via successive shortest paths.

    Bipartite flow network: source -> each A-row (capacity m_i), A-row ->
    B-row (infinite capacity, cosine cost), B-row -> sink (capacity m'_j).
    Augmenting along exact shortest residual paths (Bellman-Ford, which
    tolerates the negative backward arcs) keeps the flow optimal for its
    value; at these sizes no potential bookkeeping is worth the code.
    Refuses instances above MAX_ORACLE_CELLS cells: test-only oracle.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    masses_a = np.asarray(masses_a, dtype=np.float64)
    masses_b = np.asarray(masses_b, dtype=np.float64)
    k, m = A.shape[0], B.shape[0]
    if k * m > MAX_ORACLE_CELLS:
        raise DomainError(f"oracle refuses instance {k}x{m} > {MAX_ORACLE_CELLS} cells")
    if abs(masses_a.sum() - 1.0) > 1e-9 or abs(masses_b.sum() - 1.0) > 1e-9:
        raise DomainError("marginals must each sum to 1")
    cost = cosine_cost(A, B)

    supply = masses_a.copy()
    demand = masses_b.copy()
    plan = np.zeros((k, m))
    pot_a = np.zeros(k)  # node potentials keep reduced costs nonnegative
    pot_b = np.zeros(m)
    tol = 1e-15

    for _ in range(4 * (k + m) + 8):
        if supply.sum() <= tol:
            break
        found = _dijkstra_augment(cost, plan, supply, demand, pot_a, pot_b, tol)
        if not found:
            raise DomainError("infeasible transportation instance")
    else:  # pragma: no cover - each augmentation saturates an arc
        raise DomainError("augmentation did not converge")

    return float((plan * cost).sum()), plan


def _dijkstra_augment(cost, plan, supply, demand, pot_a, pot_b, tol):
    """One shortest augmenting path on reduced costs; mutates its inputs.

    Complementary slackness (plan_ij > 0 implies zero reduced cost) holds
    on entry and is preserved, so all residual arcs have nonnegative
    reduced cost and plain Dijkstra applies. The settle order yields an
    acyclic predecessor tree, which the zero-cost forward/backward arc
    pairs of the residual graph would break under Bellman-Ford.
    """
    k, m = cost.shape
    dist_a = np.where(supply > tol, 0.0, np.inf)
    dist_b = np.full(m, np.inf)
    prev_b = np.full(m, -1, dtype=np.int64)  # A-node feeding j
    prev_a = np.full(k, -1, dtype=np.int64)  # B-node feeding i, -1 = source
    done_a = np.zeros(k, dtype=bool)
    done_b = np.zeros(m, dtype=bool)
    target = -1

    for _ in range(k + m):
        ca = np.where(done_a, np.inf, dist_a)
        cb = np.where(done_b, np.inf, dist_b)
        ia, jb = int(ca.argmin()), int(cb.argmin())
        if not (np.isfinite(ca[ia]) or np.isfinite(cb[jb])):
            break
        if ca[ia] <= cb[jb]:
            done_a[ia] = True
            # forward arcs ia -> every j, reduced cost >= 0
            nd = dist_a[ia] + cost[ia] + pot_a[ia] - pot_b
            better = (~done_b) & (nd < dist_b)
            dist_b[better] = nd[better]
            prev_b[better] = ia
        else:
            done_b[jb] = True
            if demand[jb] > tol:
                target = jb  # nearest open sink settles first: stop
                break
            # backward arcs jb -> i where plan_ijb > 0 (reduced cost 0)
            open_back = (~done_a) & (plan[:, jb] > tol)
            nd = dist_b[jb] - cost[:, jb] - pot_a + pot_b[jb]
            better = open_back & (nd < dist_a)
            dist_a[better] = nd[better]
            prev_a[better] = jb

    if target < 0:
        return False

    # walk the predecessor tree back to a supply node
    path = []  # ("f", i, j) forward, ("b", i, j) backward
    bottleneck = demand[target]
    j = target
    while True:
        i = int(prev_b[j])
        path.append(("f", i, j))
        jb = int(prev_a[i])
        if jb < 0:
            src = i
            break
        path.append(("b", i, jb))
        bottleneck = min(bottleneck, plan[i, jb])
        j = jb
    bottleneck = min(bottleneck, supply[src])

    for kind, i, j in path:
        if kind == "f":
            plan[i, j] += bottleneck
        else:
            plan[i, j] -= bottleneck
    supply[src] -= bottleneck
    demand[target] -= bottleneck

    # Johnson-style potential update: settled nodes move by their distance,
    # unsettled by the target's, keeping every reduced cost nonnegative
    d_t = dist_b[target]
    pot_a += np.where(done_a, np.minimum(dist_a, d_t), d_t)
    pot_b += np.where(done_b, np.minimum(dist_b, d_t), d_t)
    return True
