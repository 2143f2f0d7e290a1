"""Subpacketization planning under read/write distortion budgets.

Given N databases and distortion budgets for the two phases, the planner
chooses how many consecutive model symbols share one answer/update symbol
(the subpacketization).  Each group of ``ell`` symbols yields exactly
``floor(N/2) - 1`` correctly transferred symbols, so larger groups cost
less and distort more.  The optimal fractional split between the minimum
group size and one larger size is computed in exact rational arithmetic;
integers appear only when the split is materialized into concrete bit
regions.

Cost accounting: a phase that groups symbols into subpackets of size
``ell`` moves one field symbol per subpacket per database, so its cost is
``N / ell`` symbols per model symbol.  For even N the optimal mix over a
budget ``d`` lands exactly on the line ``2 / (1 - 2/N) * (1 - d)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from math import ceil, lcm
from typing import Iterable, Optional, Sequence, Union

from .errors import PlanError

RationalLike = Union[Fraction, int, str, float]


def as_fraction(value: RationalLike) -> Fraction:
    """Exact Fraction from int/str/float/Fraction inputs ('1/3' or '0.25')."""
    if isinstance(value, float):
        # Budgets given as decimal literals mean their decimal value, not
        # the nearest binary float.
        return Fraction(str(value))
    return Fraction(value)


def base_subpacket(n_databases: int) -> int:
    """Symbols recovered correctly per subpacket: floor(N/2) - 1.

    This is also the smallest usable subpacketization.  Settings where it
    vanishes (N < 4) are rejected: every subpacket would be pure noise.
    """
    if n_databases < 4:
        raise PlanError(f"need at least 4 databases, got {n_databases}")
    return n_databases // 2 - 1


def closed_form_cost(n_databases: int, budget: RationalLike) -> Fraction:
    """The even-N cost line 2 / (1 - 2/N) * (1 - budget)."""
    return 2 / (1 - Fraction(2, n_databases)) * (1 - as_fraction(budget))


@dataclass(frozen=True)
class Budgets:
    """Allowed Hamming fraction of wrong symbols per phase, each in [0, 1)."""

    d_read: Fraction
    d_write: Fraction

    def __post_init__(self):
        object.__setattr__(self, "d_read", as_fraction(self.d_read))
        object.__setattr__(self, "d_write", as_fraction(self.d_write))
        for name in ("d_read", "d_write"):
            value = getattr(self, name)
            if not 0 <= value < 1:
                raise PlanError(f"{name} must lie in [0, 1), got {value}")


@dataclass(frozen=True)
class PhasePlan:
    """Optimal split for one phase: fractions lambda0 at the minimum
    subpacketization and lambda_eta at ``eta`` above it."""

    eta: int
    lambda0: Fraction
    lambda_eta: Fraction
    ell_small: int
    ell_large: int

    def distortion(self) -> Fraction:
        """Fraction of symbols the split leaves untransferred."""
        return self.lambda_eta * Fraction(self.eta, self.ell_large)


def phase_plan(n_databases: int, budget: RationalLike) -> PhasePlan:
    """Split one phase optimally for the given distortion budget.

    The cheapest admissible group size sits ``i* = budget/(1-budget) * k``
    above the minimum ``k``.  When ``i*`` is a positive integer a single
    section at that size is optimal; otherwise the model is split between
    ``k`` and ``k + ceil(i*)`` with the unique fractions that exhaust the
    budget exactly.
    """
    k = base_subpacket(n_databases)
    budget = as_fraction(budget)
    if not 0 <= budget < 1:
        raise PlanError(f"budget must lie in [0, 1), got {budget}")
    i_star = budget / (1 - budget) * k
    if i_star == 0:
        return PhasePlan(0, Fraction(1), Fraction(0), k, k)
    if i_star.denominator == 1:
        eta = int(i_star)
        return PhasePlan(eta, Fraction(0), Fraction(1), k, k + eta)
    eta = ceil(i_star)
    lam_eta = budget / eta * (k + eta)
    return PhasePlan(eta, 1 - lam_eta, lam_eta, k, k + eta)


def predicted_phase_cost(plan: PhasePlan, n_databases: int) -> Fraction:
    """Symbols moved per model symbol under the split."""
    return (
        plan.lambda0 * Fraction(n_databases, plan.ell_small)
        + plan.lambda_eta * Fraction(n_databases, plan.ell_large)
    )


@dataclass(frozen=True)
class RegionPlan:
    """A contiguous stretch of the model with fixed subpacketizations.

    Within a region, slot constants repeat cyclically with period
    ``y = max(ell_r, ell_w)``; the region length is a multiple of
    ``lcm(ell_r, ell_w)`` so both phases tile it exactly and query
    patterns can be reused across super subpackets.
    """

    bit_offset: int
    bit_length: int
    ell_r: int
    ell_w: int

    def __post_init__(self):
        if min(self.ell_r, self.ell_w) < 1 or self.bit_length < 0:
            raise PlanError("region with empty subpackets")
        if self.bit_length % self.period:
            raise PlanError(
                f"region length {self.bit_length} not a multiple of {self.period}"
            )

    @property
    def y(self) -> int:
        return max(self.ell_r, self.ell_w)

    @property
    def period(self) -> int:
        """Super-subpacket length: both phases realign every lcm symbols."""
        return lcm(self.ell_r, self.ell_w)

    @property
    def gamma_r(self) -> int:
        """Distinct read-query patterns needed per super subpacket."""
        return 1 if self.ell_r == self.y else self.period // self.ell_r

    @property
    def gamma_w(self) -> int:
        """Distinct write-query patterns needed per super subpacket."""
        return 1 if self.ell_w == self.y else self.period // self.ell_w

    @property
    def read_subpackets(self) -> int:
        return self.bit_length // self.ell_r

    @property
    def write_subpackets(self) -> int:
        return self.bit_length // self.ell_w

    def end(self) -> int:
        return self.bit_offset + self.bit_length


@dataclass(frozen=True)
class Plan:
    """Materialized plan: regions tiling [0, padded_length) plus the exact
    cost/distortion the tiling realizes."""

    n_databases: int
    num_submodels: int
    submodel_length: int
    budgets: Budgets
    regions: tuple[RegionPlan, ...]
    padded_length: int
    predicted_cr: Fraction
    predicted_cw: Fraction
    predicted_dr: Fraction
    predicted_dw: Fraction
    read_phase: PhasePlan
    write_phase: PhasePlan

    @property
    def base(self) -> int:
        return base_subpacket(self.n_databases)

    @property
    def max_y(self) -> int:
        return max(r.y for r in self.regions)

    @property
    def alignment_period(self) -> int:
        """lcm of all region periods; padding is always below this."""
        return lcm(*(r.period for r in self.regions))

    @property
    def is_even_n(self) -> bool:
        return self.n_databases % 2 == 0

    def cost_targets(self) -> tuple[Fraction, Fraction]:
        """The even-N closed-form cost line for both phases.

        For odd N the realized cost N/ell exceeds this line; callers that
        report it should flag the gap rather than claim the bound.
        """
        return (
            closed_form_cost(self.n_databases, self.budgets.d_read),
            closed_form_cost(self.n_databases, self.budgets.d_write),
        )

    def query_overhead_symbols(self) -> int:
        """One-time query upload per database, in symbols.

        Queries are sent once per region and reused for every super
        subpacket, so this does not scale with the model length.
        """
        m = self.num_submodels
        return m * sum(
            r.ell_r * r.gamma_r + r.ell_w * r.gamma_w for r in self.regions
        )

    def to_json(self) -> str:
        doc = {
            "n_databases": self.n_databases,
            "num_submodels": self.num_submodels,
            "submodel_length": self.submodel_length,
            "d_read": str(self.budgets.d_read),
            "d_write": str(self.budgets.d_write),
            "padded_length": self.padded_length,
            "predicted_cr": str(self.predicted_cr),
            "predicted_cw": str(self.predicted_cw),
            "predicted_dr": str(self.predicted_dr),
            "predicted_dw": str(self.predicted_dw),
            "regions": [
                {
                    "bit_offset": r.bit_offset,
                    "bit_length": r.bit_length,
                    "ell_r": r.ell_r,
                    "ell_w": r.ell_w,
                }
                for r in self.regions
            ],
        }
        return json.dumps(doc, indent=2)

    @staticmethod
    def from_json(text: str) -> "Plan":
        doc = json.loads(text)
        return build_plan(
            doc["n_databases"],
            doc["num_submodels"],
            doc["submodel_length"],
            Budgets(doc["d_read"], doc["d_write"]),
        )


def _ceil_multiple(value: Fraction, step: int) -> int:
    return ceil(value / step) * step


@dataclass(frozen=True)
class _Spec:
    ell_r: int
    ell_w: int
    target_end: Fraction  # exact boundary before integer alignment

    @property
    def period(self) -> int:
        return lcm(self.ell_r, self.ell_w)


def _region_specs(read: PhasePlan, write: PhasePlan, length: int) -> list[_Spec]:
    """Cut [0, L) at both phase boundaries into up to three stretches of
    constant (ell_r, ell_w)."""
    beta_r = read.lambda0 * length
    beta_w = write.lambda0 * length
    cuts = sorted({Fraction(0), beta_r, beta_w, Fraction(length)})
    specs: list[_Spec] = []
    for lo, hi in zip(cuts, cuts[1:]):
        mid = (lo + hi) / 2
        ell_r = read.ell_small if mid < beta_r else read.ell_large
        ell_w = write.ell_small if mid < beta_w else write.ell_large
        if specs and (specs[-1].ell_r, specs[-1].ell_w) == (ell_r, ell_w):
            specs[-1] = _Spec(ell_r, ell_w, hi)
        else:
            specs.append(_Spec(ell_r, ell_w, hi))
    return specs


def worst_case_distorted(
    regions: Iterable[RegionPlan], length: int, base: int, phase: str
) -> int:
    """Upper bound on wrongly transferred symbols among the first ``length``
    positions, over every admissible selection pattern.

    Full in-range subpackets miss exactly ``ell - base`` symbols.  A
    subpacket straddling the padding boundary with ``m`` in-range symbols
    misses at most ``min(m, ell - base)`` of them.
    """
    total = 0
    for region in regions:
        ell = region.ell_r if phase == "read" else region.ell_w
        if ell == base:
            continue
        in_range = min(region.bit_length, max(0, length - region.bit_offset))
        full, rem = divmod(in_range, ell)
        total += full * (ell - base) + min(rem, ell - base)
    return total


def _phase_cost_symbols(regions: Sequence[RegionPlan], phase: str) -> int:
    """Per-database transferred symbols for one phase (whole plan)."""
    return sum(
        r.bit_length // (r.ell_r if phase == "read" else r.ell_w) for r in regions
    )


def _materialize(
    specs: Sequence[_Spec], length: int, base: int, budgets: Budgets
) -> list[RegionPlan]:
    """Turn exact fractional boundaries into aligned integer regions.

    Boundaries only move upward (into the lower-distortion side), so a
    candidate never distorts more than the exact split; each candidate is
    still checked against the budgets with exact worst-case counts.  The
    small search tries a few extra steps per boundary so the tail can land
    on its own alignment (no padding) whenever the residues allow it, and
    optionally covers the tail with a zero-distortion region at the
    minimum subpacketization.  Cheapest feasible candidate wins.
    """
    read_budget_num = budgets.d_read * length
    write_budget_num = budgets.d_write * length

    def feasible(regions: Sequence[RegionPlan]) -> bool:
        return (
            worst_case_distorted(regions, length, base, "read") <= read_budget_num
            and worst_case_distorted(regions, length, base, "write")
            <= write_budget_num
        )

    downstream = [lcm(*(s.period for s in specs[i:])) for i in range(len(specs))]
    best: Optional[tuple[tuple[int, int, int], list[RegionPlan]]] = None

    def consider(regions: list[RegionPlan]) -> None:
        nonlocal best
        regions = [r for r in regions if r.bit_length]
        if not regions or not feasible(regions):
            return
        cost = _phase_cost_symbols(regions, "read") + _phase_cost_symbols(
            regions, "write"
        )
        padding = regions[-1].end() - length
        key = (cost, padding, len(regions))
        if best is None or key < best[0]:
            best = (key, regions)

    def extend(index: int, start: int, acc: list[RegionPlan]) -> None:
        spec = specs[index]
        p = spec.period
        if index < len(specs) - 1:
            # Region length (not the absolute boundary) must align to the
            # period; round the exact boundary up, never down.
            min_len = _ceil_multiple(max(spec.target_end - start, 0), p)
            steps = min(24, downstream[index + 1] // p + 1)
            for j in range(steps + 1):
                length_j = min_len + j * p
                extend(
                    index + 1,
                    start + length_j,
                    acc + [RegionPlan(start, length_j, spec.ell_r, spec.ell_w)],
                )
            return
        # Final stretch: allow undershoot (tail picks up the remainder with
        # zero-distortion groups) as well as exact cover with padding.
        need = max(0, length - start)
        m_cover = ceil(Fraction(need, p))
        for m in range(max(0, m_cover - 2), m_cover + 1):
            end = start + m * p
            regions = acc + [RegionPlan(start, m * p, spec.ell_r, spec.ell_w)]
            if end < length:
                tail = _ceil_multiple(Fraction(length - end), base)
                regions.append(RegionPlan(end, tail, base, base))
            consider(regions)

    extend(0, 0, [])
    if best is None:
        raise PlanError("no feasible region layout (length too small for budgets)")
    return best[1]


def build_plan(
    n_databases: int,
    num_submodels: int,
    submodel_length: int,
    budgets: Budgets,
) -> Plan:
    """Plan both phases for a model of ``submodel_length`` symbols.

    The two phase splits are computed independently, their boundaries are
    intersected into at most three regions of constant subpacketization,
    and boundaries are aligned upward so the realized distortion never
    exceeds either budget for any selection pattern.  Padding symbols
    (zeros appended past the model) are included in costs but excluded
    from distortion denominators, which stay at the model length.
    """
    if num_submodels < 1 or submodel_length < 1:
        raise PlanError("need at least one submodel and one symbol")
    base = base_subpacket(n_databases)
    read = phase_plan(n_databases, budgets.d_read)
    write = phase_plan(n_databases, budgets.d_write)
    specs = _region_specs(read, write, submodel_length)
    regions = _materialize(specs, submodel_length, base, budgets)
    padded = regions[-1].end()
    n = n_databases
    return Plan(
        n_databases=n,
        num_submodels=num_submodels,
        submodel_length=submodel_length,
        budgets=budgets,
        regions=tuple(regions),
        padded_length=padded,
        predicted_cr=Fraction(_phase_cost_symbols(regions, "read") * n, submodel_length),
        predicted_cw=Fraction(
            _phase_cost_symbols(regions, "write") * n, submodel_length
        ),
        predicted_dr=Fraction(
            worst_case_distorted(regions, submodel_length, base, "read"),
            submodel_length,
        ),
        predicted_dw=Fraction(
            worst_case_distorted(regions, submodel_length, base, "write"),
            submodel_length,
        ),
        read_phase=read,
        write_phase=write,
    )


def aligned_length(
    n_databases: int, budgets: Budgets, minimum: int = 1
) -> int:
    """Smallest length >= minimum at which the plan realizes the phase
    splits exactly: boundaries land on region alignments and no padding is
    needed, so predicted costs equal the closed-form line for even N."""
    read = phase_plan(n_databases, budgets.d_read)
    write = phase_plan(n_databases, budgets.d_write)
    step = (
        read.lambda0.denominator
        * write.lambda0.denominator
        * lcm(read.ell_small, read.ell_large, write.ell_large)
    )
    return ceil(Fraction(max(1, minimum), step)) * step
