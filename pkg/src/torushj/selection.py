"""The barrier/measure selection operator and its verification suite.

For a u-independent Hamiltonian G with Peierls barrier h_G and Mather
measures M(L_G), the operator

    (P phi)(x) = inf over mu in M(L_G) of
                 [ int sigma (h_G(., x) + phi) dmu ] / [ int sigma dmu ]

is evaluated per target node as one linear-fractional program over the
discrete Mather subpolytope.  Its fixed points are the discrete solutions of
the critical equation; the checks below exercise the Lipschitz-1 bound,
idempotence, the measure-integral comparison principle, the largest-
subsolution characterization of the vanishing-discount limit, and the
equilibrium measures attaining the infimum.

The limit-solution formula for a discounted family with u-derivative
dL/du(.,.,0) < 0 is the sign-flipped variant

    u0(x) = inf over mu of
            [ int h(y, x) dL/du(y,v,0) dmu + int V0 dmu ] / [ int dL/du dmu ],

computed through the same fractional program with a negative denominator.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np

from .barrier import BarrierMatrix
from .errors import ConfigurationError, DomainError
from .grids import GridField
from .matherlp import (
    MatherPolytope,
    fractional_minimize,
    minimize_linear_over_mather,
)
from .models import ControlModel, VelocitySet
from .solver import one_sided_subsolution_defect

__all__ = [
    "SelectionResult",
    "apply_selection_operator",
    "limit_solution_formula",
    "check_fixed_point",
    "check_operator_lipschitz",
    "measure_comparison",
    "ComparisonVerdict",
    "check_largest_subsolution",
    "SubsolutionReport",
    "equilibrium_measures",
]


@dataclass
class SelectionResult:
    field: GridField
    per_x_value: np.ndarray
    per_x_optimizer: Optional[dict] = None
    multiplicity: Optional[dict] = None


def _lift(node_values: np.ndarray, K: int) -> np.ndarray:
    """Lift a per-node vector to the flat (node, velocity) variable order."""
    return np.repeat(np.asarray(node_values, dtype=float), K)


def _dl_flat(model: ControlModel, polytope: MatherPolytope) -> np.ndarray:
    X = polytope.grid.node_coords()
    K = polytope.vset.count
    XK = np.broadcast_to(X[None, :, :], (K,) + X.shape)
    VK = np.broadcast_to(polytope.vset.velocities[:, None, :], (K,) + X.shape)
    dl = np.asarray(model.dLdu0(XK, VK), dtype=float)        # (K, N)
    return dl.T.ravel()


def _per_node_fractional(polytope, a_of_x, b_flat, sign, nodes, keep_measures,
                         check_multiplicity, threads):
    values = np.empty(len(nodes))
    measures = {} if keep_measures else None
    mult = {} if check_multiplicity else None

    def work(i_x):
        i, x = i_x
        mu, val, info = fractional_minimize(
            polytope, a_of_x(x), b_flat, sign,
            check_multiplicity=check_multiplicity,
        )
        return i, x, mu, val, info

    try:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                results = list(ex.map(work, enumerate(nodes)))
        else:
            results = [work(ix) for ix in enumerate(nodes)]
    except Exception as exc:  # noqa: BLE001 - attach the node index on the way out
        raise type(exc)(f"{exc} (during per-node fractional program)") from exc
    for i, x, mu, val, info in results:
        values[i] = val
        if measures is not None:
            measures[x] = mu
        if mult is not None:
            mult[x] = bool(info.multiplicity)
    return values, measures, mult


def apply_selection_operator(model_G: ControlModel, sigma: GridField,
                             phi: GridField, barrier: BarrierMatrix,
                             polytope: MatherPolytope,
                             nodes: Optional[Sequence[int]] = None,
                             keep_measures: bool = False,
                             check_multiplicity: bool = False,
                             threads: int = 1) -> SelectionResult:
    """Evaluate (P^sigma phi) at every node (or a subset) via fractional LPs."""
    grid = polytope.grid
    K = polytope.vset.count
    sig = sigma.values
    if sig.min() <= 0:
        raise DomainError("sigma must be strictly positive nodewise")
    if barrier.kind != "peierls":
        raise ConfigurationError("selection operator needs a peierls barrier")
    b_flat = _lift(sig, K)
    h = barrier.values
    phiv = phi.values
    target = np.arange(grid.size) if nodes is None else np.asarray(list(nodes), dtype=int)

    def a_of_x(x):
        return _lift(sig * (h[:, x] + phiv), K)

    values, measures, mult = _per_node_fractional(
        polytope, a_of_x, b_flat, "positive", target,
        keep_measures, check_multiplicity, threads)
    fld = GridField(grid, values) if nodes is None else None
    return SelectionResult(field=fld, per_x_value=values,
                           per_x_optimizer=measures, multiplicity=mult)


def limit_solution_formula(model: ControlModel, V0: GridField,
                           barrier: BarrierMatrix, polytope: MatherPolytope,
                           keep_measures: bool = False,
                           threads: int = 1) -> SelectionResult:
    """The vanishing-discount limit selected by the potential V0.

    Per node x the numerator weights are h(y, x)*dL/du(y,v,0) + V0(y) and the
    denominator is dL/du(y,v,0); the infimum is attained since the Mather
    subpolytope is compact.  Raises when dL/du(.,.,0) is not strictly
    negative (the monotone-derivative hypothesis fails).
    """
    if barrier.kind != "peierls":
        raise ConfigurationError("limit formula needs a peierls barrier")
    K = polytope.vset.count
    dl = _dl_flat(model, polytope)
    if dl.max() >= 0:
        raise ConfigurationError(
            "dL/du(x,v,0) must be strictly negative; model violates the "
            "u-derivative hypothesis"
        )
    h = barrier.values
    v0 = _lift(V0.values, K)
    target = np.arange(polytope.grid.size)

    def a_of_x(x):
        return _lift(h[:, x], K) * dl + v0

    values, measures, _ = _per_node_fractional(
        polytope, a_of_x, dl, "negative", target, keep_measures, False, threads)
    return SelectionResult(field=GridField(polytope.grid, values),
                           per_x_value=values, per_x_optimizer=measures)


def check_fixed_point(model_G: ControlModel, sigma: GridField, u: GridField,
                      barrier: BarrierMatrix, polytope: MatherPolytope,
                      tol: float, threads: int = 1):
    """True iff ||P^sigma u - u||_inf <= tol; returns (flag, sup difference)."""
    res = apply_selection_operator(model_G, sigma, u, barrier, polytope, threads=threads)
    diff = float(np.max(np.abs(res.field.values - u.values)))
    return diff <= tol, diff


def check_operator_lipschitz(model_G: ControlModel, sigma: GridField,
                             phi1: GridField, phi2: GridField,
                             barrier: BarrierMatrix, polytope: MatherPolytope,
                             slack: float = 1e-7, threads: int = 1):
    """Nonexpansiveness in the sup norm: returns (lhs, rhs, pass)."""
    r1 = apply_selection_operator(model_G, sigma, phi1, barrier, polytope, threads=threads)
    r2 = apply_selection_operator(model_G, sigma, phi2, barrier, polytope, threads=threads)
    lhs = float(np.max(np.abs(r1.field.values - r2.field.values)))
    rhs = float(np.max(np.abs(phi1.values - phi2.values)))
    return lhs, rhs, lhs <= rhs + slack


@dataclass
class ComparisonVerdict:
    hypothesis: bool
    conclusion: bool
    implication_holds: bool
    min_weighted_gap: float       # min over measures of int sigma (u2 - u1) dmu
    max_pointwise_gap: float      # max over nodes of u1 - u2


def measure_comparison(u1: GridField, u2: GridField, sigma: GridField,
                       polytope: MatherPolytope,
                       tol_hypothesis: float = 1e-9,
                       tol_conclusion: float = 1e-6) -> ComparisonVerdict:
    """Measure-integral comparison: if int sigma u1 dmu <= int sigma u2 dmu
    for every Mather measure, then u1 <= u2 everywhere (for solutions).

    The hypothesis is decided by one LP: min over the Mather subpolytope of
    int sigma (u2 - u1) dmu >= -tol.  The verdict records both sides and
    whether the implication held.
    """
    K = polytope.vset.count
    cost = _lift(sigma.values * (u2.values - u1.values), K)
    _, gap, _ = minimize_linear_over_mather(polytope, cost)
    hyp = gap >= -tol_hypothesis
    maxgap = float(np.max(u1.values - u2.values))
    con = maxgap <= tol_conclusion
    return ComparisonVerdict(hypothesis=hyp, conclusion=con,
                             implication_holds=(not hyp) or con,
                             min_weighted_gap=float(gap),
                             max_pointwise_gap=maxgap)


@dataclass
class SubsolutionEntry:
    index: int
    is_subsolution: bool
    subsolution_defect: float
    member: Optional[bool] = None
    membership_gap: Optional[float] = None
    dominated: Optional[bool] = None
    domination_gap: Optional[float] = None


@dataclass
class SubsolutionReport:
    entries: list
    violations: list = dc_field(default_factory=list)

    @property
    def all_members_dominated(self) -> bool:
        return not self.violations


def check_largest_subsolution(u0: GridField, V0: GridField,
                              polytope: MatherPolytope,
                              candidates: Sequence[GridField],
                              model: ControlModel, vset: VelocitySet, dt: float,
                              sub_tol: float = 1e-6,
                              member_tol: float = 1e-7,
                              dom_tol: float = 1e-6) -> SubsolutionReport:
    """Verify that u0 dominates every critical subsolution w satisfying the
    measure inequality  int w dL/du dmu >= int V0 dmu  for all Mather measures.

    Candidates failing the one-sided subsolution residual are rejected with
    diagnostics (not an error); members that exceed u0 beyond dom_tol are
    recorded as violations.
    """
    K = polytope.vset.count
    dl = _dl_flat(model, polytope)
    v0 = _lift(V0.values, K)
    entries = []
    violations = []
    for i, w in enumerate(candidates):
        defect = one_sided_subsolution_defect(model, w, vset, dt)
        entry = SubsolutionEntry(index=i, is_subsolution=defect <= sub_tol,
                                 subsolution_defect=defect)
        if entry.is_subsolution:
            cost = _lift(w.values, K) * dl - v0
            _, gap, _ = minimize_linear_over_mather(polytope, cost)
            entry.member = gap >= -member_tol
            entry.membership_gap = float(gap)
            if entry.member:
                dgap = float(np.max(w.values - u0.values))
                entry.dominated = dgap <= dom_tol
                entry.domination_gap = dgap
                if not entry.dominated:
                    violations.append(i)
        entries.append(entry)
    return SubsolutionReport(entries=entries, violations=violations)


def equilibrium_measures(model_G: ControlModel, phi: GridField, x: int,
                         barrier: BarrierMatrix, polytope: MatherPolytope):
    """A Mather measure attaining (P phi)(x) for sigma = 1, with multiplicity.

    Returns (witness, value, multiplicity); multiplicity is True iff the
    argmin face has dimension >= 1 (mass is movable off the witness's support
    at optimal cost).
    """
    if barrier.kind != "peierls":
        raise ConfigurationError("equilibrium measures need a peierls barrier")
    K = polytope.vset.count
    cost = _lift(barrier.values[:, int(x)] + phi.values, K)
    mu, value, info = minimize_linear_over_mather(polytope, cost,
                                                  check_multiplicity=True)
    return mu, value, bool(info.multiplicity)
