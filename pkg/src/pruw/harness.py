"""Verification machinery: god-view decoding, cost/distortion meters,
and privacy auditors.

The god view inverts the storage masking by combining all N shards; no
protocol participant can do this (each database alone sees only uniform
noise), which is exactly what the auditors check.  Privacy audits observe
one database at a time, matching the non-collusion assumption; a joint
two-database audit is available as a diagnostic and is expected to show
leakage.

Enumeration-mode audits compute exact total-variation distances by
enumerating the noise feeding one observable (all other noise held
fixed, which is sound because every conditional must itself be uniform
for the distance to vanish).  Sampling mode falls back to chi-square
uniformity tests on bucketed observables with Bonferroni correction.
"""

from __future__ import annotations

import itertools
import json
import random
from dataclasses import dataclass
from fractions import Fraction
from math import lcm
from typing import Callable, Optional, Sequence, Union

from . import codec
from .codec import (
    EvalPoints,
    SelectionPattern,
    cyclic_index,
    default_points,
    first_k_pattern,
)
from .errors import CorruptionError, PlanError, ProtocolError
from .field import PrimeField, SymbolSource
from .planner import Budgets, Plan, RegionPlan, base_subpacket, build_plan
from .roles import DatabaseNode, UserClient, init_payload
from .transport import InProcChannel, Message, MessageTag

ENUMERATION_GUARD = 10**7


# -- reference model helpers -------------------------------------------------


def random_model(
    field: PrimeField, num_submodels: int, length: int, rng: SymbolSource, nonzero: bool = False
) -> list[list[int]]:
    """M x length plaintext model; ``nonzero`` draws from F_q without 0 so
    every skipped transfer is observable as distortion."""
    draw = rng.nonzero if nonzero else rng.symbol
    return [[draw() for _ in range(length)] for _ in range(num_submodels)]


def pad_model(model: Sequence[Sequence[int]], padded_length: int) -> list[list[int]]:
    return [list(row) + [0] * (padded_length - len(row)) for row in model]


def nonzero_vector(field: PrimeField, length: int, rng: SymbolSource) -> list[int]:
    return [rng.nonzero() for _ in range(length)]


def sample_update_prior(field: PrimeField, d_write: Fraction, rng: random.Random) -> int:
    """Draw one update value from the public prior: zero with the extra
    sparsification mass, otherwise uniform."""
    if rng.random() < d_write:
        return 0
    return rng.randrange(field.q)


def prior_vector(
    field: PrimeField, length: int, d_write: Fraction, rng: random.Random
) -> list[int]:
    return [sample_update_prior(field, d_write, rng) for _ in range(length)]


# -- god view -----------------------------------------------------------------


def god_decode(
    rows_by_db: Sequence[Sequence[Sequence[Sequence[int]]]],
    points: EvalPoints,
    plan: Plan,
) -> list[list[int]]:
    """Recover the plaintext model from all N shards.

    ``rows_by_db[n][r]`` holds database n's rows for region r.  Per
    position there are 1 + floor(N/2) unknowns (the model symbol plus the
    mask coefficients), solved on the first databases and checked against
    the rest; disagreement means the shards were not produced from one
    consistent encoding.
    """
    field = points.field
    q = field.q
    n = points.n_databases
    if len(rows_by_db) != n:
        raise ProtocolError("all shards are required for god decoding")
    unknowns = n // 2 + 1
    model = [[0] * plan.padded_length for _ in range(plan.num_submodels)]
    for r_idx, region in enumerate(plan.regions):
        ops = {}
        for c in range(1, region.y + 1):
            f = points.slot_points[c - 1]
            rows = []
            for alpha in points.db_points:
                row = [field.inv((f - alpha) % q)]
                row.extend(pow(alpha, j, q) for j in range(unknowns - 1))
                rows.append(row)
            ops[c] = (field.invert(rows[:unknowns]), rows[unknowns:])
        for p in range(region.bit_length):
            inverse, extra = ops[cyclic_index(p + 1, region.y)]
            for m in range(plan.num_submodels):
                rhs = [rows_by_db[db][r_idx][p][m] for db in range(n)]
                solution = field.matvec(inverse, rhs[:unknowns])
                for row, observed in zip(extra, rhs[unknowns:]):
                    if sum(a * x for a, x in zip(row, solution)) % q != observed:
                        raise CorruptionError(
                            f"shards disagree at region {r_idx} position {p}"
                        )
                model[m][region.bit_offset + p] = solution[0]
    return model


# -- distortion ---------------------------------------------------------------


def hamming_fraction(
    actual: Sequence[int], observed: Sequence[int], length: int
) -> Fraction:
    """Fraction of the first ``length`` positions that disagree."""
    wrong = sum(1 for a, b in zip(actual[:length], observed[:length]) if a != b)
    return Fraction(wrong, length)


@dataclass(frozen=True)
class DistortionReport:
    d_read: Fraction
    d_write: Fraction
    d_read_budget: Fraction
    d_write_budget: Fraction

    @property
    def read_within_budget(self) -> bool:
        return self.d_read <= self.d_read_budget

    @property
    def write_within_budget(self) -> bool:
        return self.d_write <= self.d_write_budget

    def to_json(self) -> str:
        return json.dumps(
            {
                "d_read": str(self.d_read),
                "d_write": str(self.d_write),
                "d_read_budget": str(self.d_read_budget),
                "d_write_budget": str(self.d_write_budget),
                "read_within_budget": self.read_within_budget,
                "write_within_budget": self.write_within_budget,
            },
            indent=2,
        )


def measure_distortion(
    reference_submodel: Sequence[int],
    downloaded: Sequence[int],
    intended_deltas: Sequence[int],
    uploaded_deltas: Sequence[int],
    budgets: Budgets,
    length: int,
) -> DistortionReport:
    return DistortionReport(
        hamming_fraction(reference_submodel, downloaded, length),
        hamming_fraction(intended_deltas, uploaded_deltas, length),
        budgets.d_read,
        budgets.d_write,
    )


# -- privacy audits -----------------------------------------------------------


@dataclass
class AuditResult:
    name: str
    mode: str
    observables: int
    max_distance: Union[Fraction, float]
    passed: bool
    diagnostic: bool = False
    detail: str = ""

    @property
    def exact(self) -> bool:
        return self.mode == "enumerate"


@dataclass
class PrivacyReport:
    results: list[AuditResult]

    @property
    def all_private(self) -> bool:
        return all(r.passed for r in self.results if not r.diagnostic)

    def to_json(self) -> str:
        return json.dumps(
            [
                {
                    "name": r.name,
                    "mode": r.mode,
                    "observables": r.observables,
                    "max_distance": str(r.max_distance)
                    if isinstance(r.max_distance, Fraction)
                    else r.max_distance,
                    "passed": r.passed,
                    "diagnostic": r.diagnostic,
                    "detail": r.detail,
                }
                for r in self.results
            ],
            indent=2,
        )


@dataclass
class AuditSetup:
    """Small fixed instance every auditor runs against."""

    field: PrimeField
    points: EvalPoints
    region: RegionPlan
    pattern: SelectionPattern
    num_submodels: int
    seed: int = 0

    @property
    def base(self) -> int:
        return base_subpacket(self.points.n_databases)


def default_audit_setup(
    q: int = 13,
    n_databases: int = 4,
    num_submodels: int = 2,
    ell_r: int = 2,
    ell_w: int = 2,
    seed: int = 0,
) -> AuditSetup:
    field = PrimeField(q)
    region = RegionPlan(0, lcm(ell_r, ell_w), ell_r, ell_w)
    points = default_points(field, n_databases, region.y)
    pattern = first_k_pattern(region, base_subpacket(n_databases))
    return AuditSetup(field, points, region, pattern, num_submodels, seed)


def _tv_distance(counts_a: dict, counts_b: dict, states: int) -> Fraction:
    keys = set(counts_a) | set(counts_b)
    total = sum(abs(counts_a.get(k, 0) - counts_b.get(k, 0)) for k in keys)
    return Fraction(total, 2 * states)


def _enumerate_vectors(q: int, length: int):
    return itertools.product(range(q), repeat=length)


def _guard(states: int) -> None:
    if states > ENUMERATION_GUARD:
        raise PlanError(
            f"{states} states exceed the enumeration guard; use sampling mode"
        )


def _exact_row_audit(
    name: str,
    builders: Sequence[tuple[str, Callable[[Sequence[int]], tuple]]],
    q: int,
    mask_len: int,
) -> AuditResult:
    """Exact TV distance per observable between two secret assignments.

    ``builders`` yields label plus a function from one enumerated noise
    vector to the observable pair (value under secret a, value under b).
    """
    states = q**mask_len
    _guard(states)
    worst = Fraction(0)
    worst_label = ""
    for label, build in builders:
        counts_a: dict = {}
        counts_b: dict = {}
        for mask in _enumerate_vectors(q, mask_len):
            obs_a, obs_b = build(mask)
            counts_a[obs_a] = counts_a.get(obs_a, 0) + 1
            counts_b[obs_b] = counts_b.get(obs_b, 0) + 1
        distance = _tv_distance(counts_a, counts_b, states)
        if distance > worst:
            worst, worst_label = distance, label
    return AuditResult(
        name,
        "enumerate",
        len(builders),
        worst,
        worst == 0,
        detail=f"worst observable {worst_label}" if worst else "",
    )


def _read_row_builders(setup: AuditSetup, submodels: tuple[int, int]):
    a, b = submodels
    field = setup.field
    m = setup.num_submodels
    grid = codec.read_row_slot_points(setup.points, setup.region)
    builders = []
    for db, alpha in enumerate(setup.points.db_points, start=1):
        for s in range(setup.region.gamma_r):
            chosen = setup.pattern.read_sets[s]
            for i in range(1, setup.region.ell_r + 1):
                f = grid[s][i - 1]
                sel = i in chosen

                def build(mask, f=f, sel=sel, alpha=alpha):
                    return (
                        tuple(codec.read_query_row(field, m, a, sel, f, alpha, mask)),
                        tuple(codec.read_query_row(field, m, b, sel, f, alpha, mask)),
                    )

                builders.append((f"db{db} read row s={s + 1} i={i}", build))
    return builders


def _write_row_builders(setup: AuditSetup, submodels: tuple[int, int]):
    a, b = submodels
    field = setup.field
    m = setup.num_submodels
    grid = codec.write_row_slot_points(setup.points, setup.region)
    builders = []
    for db, alpha in enumerate(setup.points.db_points, start=1):
        for s in range(setup.region.gamma_w):
            chosen = setup.pattern.write_sets[s]
            for i in range(1, setup.region.ell_w + 1):
                f = grid[s][i - 1]
                sel = i in chosen

                def build(mask, f=f, sel=sel, alpha=alpha):
                    return (
                        tuple(codec.write_query_row(field, m, a, sel, f, alpha, mask)),
                        tuple(codec.write_query_row(field, m, b, sel, f, alpha, mask)),
                    )

                builders.append((f"db{db} write row s={s + 1} i={i}", build))
    return builders


def audit_index_privacy(
    setup: AuditSetup,
    submodels: tuple[int, int] = (1, 2),
    mode: str = "enumerate",
    samples: int = 20000,
    alpha: float = 0.01,
) -> AuditResult:
    """Distribution of each query row under two target submodels."""
    builders = _read_row_builders(setup, submodels) + _write_row_builders(
        setup, submodels
    )
    if mode == "enumerate":
        _guard(setup.field.q**setup.num_submodels)
        return _exact_row_audit(
            "index-privacy", builders, setup.field.q, setup.num_submodels
        )
    return _sampled_row_audit(
        "index-privacy", builders, setup, samples, alpha, setup.num_submodels
    )


def audit_update_privacy(
    setup: AuditSetup,
    delta_pairs: Optional[tuple[Sequence[Sequence[int]], Sequence[Sequence[int]]]] = None,
    mode: str = "enumerate",
    samples: int = 20000,
    alpha: float = 0.01,
) -> AuditResult:
    """Distribution of each update symbol under two update assignments."""
    field = setup.field
    region = setup.region
    k = setup.base
    if delta_pairs is None:
        deltas_a = [[0] * k for _ in range(region.gamma_w)]
        deltas_b = [
            [(s + i + 1) % field.q for i in range(k)] for s in range(region.gamma_w)
        ]
    else:
        deltas_a, deltas_b = (list(map(list, side)) for side in delta_pairs)
    grid = codec.write_row_slot_points(setup.points, region)
    builders = []
    for db, alpha_point in enumerate(setup.points.db_points, start=1):
        for s in range(region.gamma_w):
            chosen = sorted(setup.pattern.write_sets[s])
            slot_pts = [grid[s][i - 1] for i in chosen]

            def build(mask, slot_pts=slot_pts, alpha_point=alpha_point, s=s):
                z = mask[0]
                return (
                    codec.combined_update_symbol(
                        field, deltas_a[s], slot_pts, alpha_point, z
                    ),
                    codec.combined_update_symbol(
                        field, deltas_b[s], slot_pts, alpha_point, z
                    ),
                )

            builders.append((f"db{db} update slot s={s + 1}", build))
    if mode == "enumerate":
        _guard(field.q)
        return _exact_row_audit("update-privacy", builders, field.q, 1)
    return _sampled_row_audit("update-privacy", builders, setup, samples, alpha, 1)


def audit_storage_security(
    setup: AuditSetup,
    model_pair: Optional[tuple[Sequence[Sequence[int]], Sequence[Sequence[int]]]] = None,
    mode: str = "enumerate",
    samples: int = 20000,
    alpha: float = 0.01,
) -> AuditResult:
    """Distribution of each stored row under two plaintext models.

    Enumerates the degree-0 mask coefficient with the higher-degree
    coefficients pinned; every conditional slice must already be uniform
    for the audit to pass.
    """
    field = setup.field
    region = setup.region
    m = setup.num_submodels
    aux = SymbolSource(field, seed=setup.seed + 7)
    if model_pair is None:
        model_a = [[0] * region.bit_length for _ in range(m)]
        model_b = random_model(field, m, region.bit_length, aux, nonzero=True)
    else:
        model_a, model_b = model_pair
    degree = setup.points.n_databases // 2
    builders = []
    for db, alpha_point in enumerate(setup.points.db_points, start=1):
        for p in range(region.bit_length):
            f = setup.points.slot_points[cyclic_index(p + 1, region.y) - 1]
            col_a = [model_a[mm][p] for mm in range(m)]
            col_b = [model_b[mm][p] for mm in range(m)]
            fixed = [aux.vector(m) for _ in range(degree - 1)]

            def build(mask, col_a=col_a, col_b=col_b, f=f, alpha_point=alpha_point, fixed=fixed):
                noise = [list(mask)] + fixed
                return (
                    tuple(codec.storage_row(field, col_a, f, alpha_point, noise)),
                    tuple(codec.storage_row(field, col_b, f, alpha_point, noise)),
                )

            builders.append((f"db{db} storage row p={p}", build))
    if mode == "enumerate":
        _guard(field.q**m)
        return _exact_row_audit("storage-security", builders, field.q, m)
    return _sampled_row_audit("storage-security", builders, setup, samples, alpha, m)


def audit_joint_pair_diagnostic(
    setup: AuditSetup,
    submodels: tuple[int, int] = (1, 2),
    db_pair: tuple[int, int] = (1, 2),
) -> AuditResult:
    """Two colluding databases' joint view of one selected read row.

    Outside the trust model; expected to show nonzero distance because
    the pair can cancel the shared mask.
    """
    field = setup.field
    m = setup.num_submodels
    a, b = submodels
    grid = codec.read_row_slot_points(setup.points, setup.region)
    s = 0
    i = min(setup.pattern.read_sets[0])
    f = grid[s][i - 1]
    alphas = [setup.points.db_points[d - 1] for d in db_pair]

    def build(mask):
        row_pair_a = tuple(
            tuple(codec.read_query_row(field, m, a, True, f, al, mask)) for al in alphas
        )
        row_pair_b = tuple(
            tuple(codec.read_query_row(field, m, b, True, f, al, mask)) for al in alphas
        )
        return row_pair_a, row_pair_b

    result = _exact_row_audit(
        "joint-collusion-diagnostic", [("joint read row", build)], field.q, m
    )
    result.diagnostic = True
    result.passed = True  # informational only, never gates
    result.detail = "two-database view; leakage expected outside the trust model"
    return result


def _bucket_probabilities(q: int, buckets: int) -> list[Fraction]:
    return [
        Fraction((b + 1) * q // buckets - b * q // buckets, q) for b in range(buckets)
    ]


def _sampled_row_audit(
    name: str,
    builders,
    setup: AuditSetup,
    samples: int,
    alpha: float,
    mask_len: int,
) -> AuditResult:
    """Chi-square uniformity per observable, Bonferroni across observables."""
    from scipy.stats import chi2

    field = setup.field
    q = field.q
    per_component = 4 if mask_len > 1 else 16
    cells = per_component**mask_len
    probs_1d = _bucket_probabilities(q, per_component)
    cell_probs = []
    for combo in itertools.product(range(per_component), repeat=mask_len):
        p = Fraction(1)
        for b in combo:
            p *= probs_1d[b]
        cell_probs.append(float(p))
    threshold = chi2.ppf(1 - alpha / (2 * max(1, len(builders))), cells - 1)
    rng = random.Random(setup.seed + 1009)
    worst_stat = 0.0
    worst_tv = 0.0
    passed = True

    def bucket(observable) -> int:
        values = observable if isinstance(observable, tuple) else (observable,)
        index = 0
        for v in values:
            index = index * per_component + v * per_component // q
        return index

    for _label, build in builders:
        counts_a = [0] * cells
        counts_b = [0] * cells
        for _ in range(samples):
            mask = tuple(rng.randrange(q) for _ in range(mask_len))
            counts_a[bucket(build(mask)[0])] += 1
            mask = tuple(rng.randrange(q) for _ in range(mask_len))
            counts_b[bucket(build(mask)[1])] += 1
        for counts in (counts_a, counts_b):
            stat = sum(
                (c - samples * p) ** 2 / (samples * p)
                for c, p in zip(counts, cell_probs)
                if p
            )
            worst_stat = max(worst_stat, stat)
            if stat > threshold:
                passed = False
        worst_tv = max(
            worst_tv,
            sum(abs(ca - cb) for ca, cb in zip(counts_a, counts_b)) / (2 * samples),
        )
    return AuditResult(
        name,
        "sample",
        len(builders),
        worst_tv,
        passed,
        detail=f"worst chi2 {worst_stat:.2f} vs threshold {threshold:.2f}, "
        f"{samples} samples per secret",
    )


def run_all_audits(
    setup: AuditSetup,
    mode: str = "enumerate",
    samples: int = 20000,
    include_joint: bool = True,
) -> PrivacyReport:
    results = [
        audit_index_privacy(setup, mode=mode, samples=samples),
        audit_update_privacy(setup, mode=mode, samples=samples),
        audit_storage_security(setup, mode=mode, samples=samples),
    ]
    if include_joint:
        results.append(audit_joint_pair_diagnostic(setup))
    return PrivacyReport(results)


# -- full simulation assembly ---------------------------------------------------


@dataclass
class Simulation:
    """In-process multi-database deployment plus the plaintext mirror."""

    field: PrimeField
    plan: Plan
    points: EvalPoints
    nodes: dict[int, DatabaseNode]
    channel: InProcChannel
    reference: list[list[int]]  # padded plaintext mirror

    def shards(self) -> list[list[list[list[int]]]]:
        return [
            self.nodes[db].rows_by_region for db in range(1, self.plan.n_databases + 1)
        ]

    def god_view(self) -> list[list[int]]:
        return god_decode(self.shards(), self.points, self.plan)

    def apply_mirror_update(self, submodel_index: int, uploaded: Sequence[int]) -> None:
        q = self.field.q
        row = self.reference[submodel_index - 1]
        for p, delta in enumerate(uploaded):
            if delta:
                row[p] = (row[p] + delta) % q

    def client(
        self,
        submodel_index: int,
        patterns: Sequence[SelectionPattern],
        rng: SymbolSource,
    ) -> UserClient:
        return UserClient(
            self.channel, self.plan, self.points, submodel_index, patterns, rng
        )


def provision_channel(channel, plan: Plan, points: EvalPoints, model_padded, rng) -> None:
    """Encode every region once and install the per-database shards."""
    q = points.field.q
    shard_rows: list[list] = [[] for _ in range(plan.n_databases)]
    for region in plan.regions:
        per_db = codec.encode_region_shards(model_padded, points, region, rng)
        for db_idx in range(plan.n_databases):
            shard_rows[db_idx].append(per_db[db_idx])
    for db in range(1, plan.n_databases + 1):
        payload = init_payload(
            q, db, plan.n_databases, plan.num_submodels, plan.regions, shard_rows[db - 1]
        )
        reply = channel.send(db, Message(MessageTag.INIT_STORAGE, 0, 0, payload))
        if reply.tag != MessageTag.ACK:
            raise ProtocolError(f"database {db} rejected provisioning: {reply.tag!r}")


def build_simulation(
    n_databases: int,
    num_submodels: int,
    length: int,
    q: int,
    budgets: Budgets,
    seed: int,
    nonzero_model: bool = True,
    record_bytes: bool = False,
) -> Simulation:
    field = PrimeField(q)
    plan = build_plan(n_databases, num_submodels, length, budgets)
    points = default_points(field, n_databases, plan.max_y)
    nodes = {
        db: DatabaseNode(db, field) for db in range(1, n_databases + 1)
    }
    channel = InProcChannel(
        {db: node.dispatch for db, node in nodes.items()}, q, record_bytes=record_bytes
    )
    model_rng = SymbolSource(field, seed=seed)
    model = random_model(field, num_submodels, length, model_rng, nonzero=nonzero_model)
    padded = pad_model(model, plan.padded_length)
    provision_channel(channel, plan, points, padded, SymbolSource(field, seed=seed + 1))
    return Simulation(field, plan, points, nodes, channel, padded)
