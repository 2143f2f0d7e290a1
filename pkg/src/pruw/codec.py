"""Storage encoding, query generation, answer decoding, and updates.

Storage layout: consecutive model positions are tagged with distinct slot
constants f_1..f_y repeating cyclically with period y = max(ell_r, ell_w),
so every read subpacket (ell_r consecutive positions) and every write
subpacket (ell_w consecutive positions) carries pairwise-distinct slot
constants.  Database n stores, per position, the column of all M
submodels scaled by 1/(f - alpha_n) plus a masking polynomial in alpha_n
of degree floor(N/2)-1 with fresh vector coefficients per position.

Every noise term that appears in more than one database's view (storage
mask coefficients, query mask vectors, the update noise scalar) is a
single realization evaluated per database; only alpha_n varies across
databases.  The per-database generators therefore draw noise from the
caller-supplied source in a fixed order: handing equally-seeded sources
to the N per-database calls reproduces one shared realization, and the
``*_all`` bulk variants do the same draw once and evaluate it everywhere.

Decoding a subpacket solves for the selected model symbols (coefficients
1/(f - alpha_n)) together with the masking polynomial coefficients; with
k = floor(N/2)-1 selected symbols and a degree-floor(N/2) polynomial the
system is square on the first 2*floor(N/2) databases and any leftover
answer is checked for consistency.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import random

from .errors import CorruptionError, PlanError, ProtocolError
from .field import PrimeField, SymbolSource
from .planner import RegionPlan, base_subpacket


def cyclic_index(position: int, period: int) -> int:
    """Map a 1-based position to its 1-based slot in [1, period]."""
    r = position % period
    return r if r else period


@dataclass(frozen=True)
class EvalPoints:
    """Evaluation points: one per database (alpha_n) and one per cyclic
    slot (f_i).  All points distinct, and no slot point may coincide with
    a database point, so every f_i - alpha_n is invertible."""

    field: PrimeField
    db_points: tuple[int, ...]
    slot_points: tuple[int, ...]

    def __post_init__(self):
        q = self.field.q
        alphas = tuple(a % q for a in self.db_points)
        slots = tuple(f % q for f in self.slot_points)
        object.__setattr__(self, "db_points", alphas)
        object.__setattr__(self, "slot_points", slots)
        if len(set(alphas)) != len(alphas):
            raise PlanError("database points must be distinct")
        if len(set(slots)) != len(slots):
            raise PlanError("slot points must be distinct")
        if set(alphas) & set(slots):
            raise PlanError("slot points must avoid database points")

    @property
    def n_databases(self) -> int:
        return len(self.db_points)


def default_points(field: PrimeField, n_databases: int, num_slots: int) -> EvalPoints:
    """alpha_n = n and f_i = N + i; needs q > N + num_slots."""
    if field.q <= n_databases + num_slots:
        raise PlanError(
            f"modulus {field.q} too small for {n_databases} databases "
            f"and {num_slots} slots"
        )
    return EvalPoints(
        field,
        tuple(range(1, n_databases + 1)),
        tuple(range(n_databases + 1, n_databases + num_slots + 1)),
    )


@dataclass(frozen=True)
class SelectionPattern:
    """Which positions of each subpacket are transferred correctly.

    ``read_sets[s]`` is the selected set (1-based indices within a read
    subpacket) for pattern slot s; likewise ``write_sets``.  Each set has
    exactly floor(N/2)-1 elements.
    """

    read_sets: tuple[frozenset[int], ...]
    write_sets: tuple[frozenset[int], ...]

    def validate(self, region: RegionPlan, base: int) -> None:
        if len(self.read_sets) != region.gamma_r:
            raise PlanError(
                f"expected {region.gamma_r} read sets, got {len(self.read_sets)}"
            )
        if len(self.write_sets) != region.gamma_w:
            raise PlanError(
                f"expected {region.gamma_w} write sets, got {len(self.write_sets)}"
            )
        for sets, ell in ((self.read_sets, region.ell_r), (self.write_sets, region.ell_w)):
            for chosen in sets:
                if len(chosen) != base:
                    raise PlanError(f"selection sets must have {base} elements")
                if not all(1 <= i <= ell for i in chosen):
                    raise PlanError("selection index outside the subpacket")


def explicit_pattern(
    read_sets: Sequence[Sequence[int]], write_sets: Sequence[Sequence[int]]
) -> SelectionPattern:
    return SelectionPattern(
        tuple(frozenset(s) for s in read_sets),
        tuple(frozenset(s) for s in write_sets),
    )


def first_k_pattern(region: RegionPlan, base: int) -> SelectionPattern:
    """Select the first k positions of every subpacket."""
    head = frozenset(range(1, base + 1))
    return SelectionPattern((head,) * region.gamma_r, (head,) * region.gamma_w)


def random_pattern(region: RegionPlan, base: int, rng: random.Random) -> SelectionPattern:
    """Seeded uniform choice of k positions per pattern slot."""
    return SelectionPattern(
        tuple(
            frozenset(rng.sample(range(1, region.ell_r + 1), base))
            for _ in range(region.gamma_r)
        ),
        tuple(
            frozenset(rng.sample(range(1, region.ell_w + 1), base))
            for _ in range(region.gamma_w)
        ),
    )


def top_k_write_pattern(
    region: RegionPlan,
    base: int,
    magnitudes: Sequence[float],
    read_sets: Optional[Sequence[Sequence[int]]] = None,
) -> SelectionPattern:
    """Write-side selection by accumulated update magnitude.

    ``magnitudes`` covers the region (one nonnegative weight per position,
    padding excluded or zero).  Because one write query is reused for all
    subpackets sharing a pattern slot, magnitudes are summed per slot
    position before ranking.
    """
    totals = [[0.0] * region.ell_w for _ in range(region.gamma_w)]
    for p, w in enumerate(magnitudes):
        sub, i = divmod(p, region.ell_w)
        totals[sub % region.gamma_w][i] += abs(w)
    write_sets = tuple(
        frozenset(
            sorted(range(1, region.ell_w + 1), key=lambda i: -per_slot[i - 1])[:base]
        )
        for per_slot in totals
    )
    if read_sets is None:
        reads = (frozenset(range(1, base + 1)),) * region.gamma_r
    else:
        reads = tuple(frozenset(s) for s in read_sets)
    return SelectionPattern(reads, write_sets)


# -- wire objects ---------------------------------------------------------


@dataclass
class ReadQuery:
    """gamma_r * ell_r masked indicator rows, each of length M."""

    rows: list[list[int]]


@dataclass
class ReadAnswer:
    """One combined symbol per read subpacket of the region."""

    symbols: list[int]


@dataclass
class WriteQuery:
    """gamma_w * ell_w masked scaled-indicator rows, each of length M."""

    rows: list[list[int]]


@dataclass
class UpdateSymbols:
    """One combined update symbol per write subpacket of the region."""

    symbols: list[int]


# -- row-level formulas (also exercised directly by the privacy audits) ---


def read_query_row(
    field: PrimeField,
    num_submodels: int,
    submodel_index: int,
    selected: bool,
    slot_point: int,
    db_point: int,
    mask_vector: Sequence[int],
) -> list[int]:
    """Indicator of the target submodel (if selected) masked additively by
    (f - alpha) times a uniform vector."""
    q = field.q
    coef = (slot_point - db_point) % q
    row = [coef * z % q for z in mask_vector]
    if selected:
        row[submodel_index - 1] = (row[submodel_index - 1] + 1) % q
    return row


def write_query_row(
    field: PrimeField,
    num_submodels: int,
    submodel_index: int,
    selected: bool,
    slot_point: int,
    db_point: int,
    mask_vector: Sequence[int],
) -> list[int]:
    """Scaled indicator 1/(f - alpha) at the target submodel (if selected)
    masked additively by a uniform vector."""
    q = field.q
    row = [z % q for z in mask_vector]
    if selected:
        scale = field.inv((slot_point - db_point) % q)
        row[submodel_index - 1] = (row[submodel_index - 1] + scale) % q
    return row


def storage_row(
    field: PrimeField,
    model_column: Sequence[int],
    slot_point: int,
    db_point: int,
    noise_vectors: Sequence[Sequence[int]],
) -> list[int]:
    """One stored position: column/(f - alpha) + sum_j alpha^j * noise_j."""
    q = field.q
    inv_c = field.inv((slot_point - db_point) % q)
    row = [w * inv_c % q for w in model_column]
    power = 1
    for vec in noise_vectors:
        for m, z in enumerate(vec):
            row[m] = (row[m] + power * z) % q
        power = power * db_point % q
    return row


def combined_update_symbol(
    field: PrimeField,
    deltas: Sequence[int],
    slot_points: Sequence[int],
    db_point: int,
    noise: int,
) -> int:
    """Single-symbol encoding of k update values for one subpacket.

    Viewed as a polynomial in the evaluation point, the result equals each
    update value at that value's slot point regardless of the noise term,
    which only shifts the polynomial by a multiple of the full product.
    """
    q = field.q
    if len(deltas) != len(slot_points):
        raise ProtocolError("one update value per selected slot expected")
    total = 0
    for i, delta in enumerate(deltas):
        denom = 1
        numer = delta
        fi = slot_points[i]
        for j, fj in enumerate(slot_points):
            if j != i:
                denom = denom * (fj - fi) % q
                numer = numer * (fj - db_point) % q
        total = (total + numer * field.inv(denom)) % q
    prod_all = 1
    for fj in slot_points:
        prod_all = prod_all * (fj - db_point) % q
    return (total + prod_all * noise) % q


# -- region layout helpers -------------------------------------------------


def read_row_slot_points(points: EvalPoints, region: RegionPlan) -> list[list[int]]:
    """Slot point for each (pattern slot, row) of the read query."""
    y = region.y
    return [
        [
            points.slot_points[cyclic_index(s * region.ell_r + i, y) - 1]
            for i in range(1, region.ell_r + 1)
        ]
        for s in range(region.gamma_r)
    ]


def write_row_slot_points(points: EvalPoints, region: RegionPlan) -> list[list[int]]:
    """Slot point for each (pattern slot, row) of the write query."""
    y = region.y
    return [
        [
            points.slot_points[cyclic_index(s * region.ell_w + i, y) - 1]
            for i in range(1, region.ell_w + 1)
        ]
        for s in range(region.gamma_w)
    ]


# -- storage ----------------------------------------------------------------


def encode_storage(
    model: Sequence[Sequence[int]],
    points: EvalPoints,
    region: RegionPlan,
    db_index: int,
    rng: SymbolSource,
) -> list[list[int]]:
    """Region rows for one database.

    The masking coefficients are drawn in a fixed order (per position,
    ascending degree), so equally-seeded sources across the N per-database
    calls realize the same mask evaluated at each database's point.
    """
    points.field.require_same(rng.field)
    num_sub = len(model)
    degree = len(points.db_points) // 2  # mask has this many coefficients
    alpha = points.db_points[db_index - 1]
    slots = points.slot_points
    y = region.y
    rows = []
    for p in range(region.bit_length):
        slot_point = slots[cyclic_index(p + 1, y) - 1]
        column = [model[m][region.bit_offset + p] for m in range(num_sub)]
        noise = [rng.vector(num_sub) for _ in range(degree)]
        rows.append(storage_row(points.field, column, slot_point, alpha, noise))
    return rows


def encode_region_shards(
    model: Sequence[Sequence[int]],
    points: EvalPoints,
    region: RegionPlan,
    rng: SymbolSource,
) -> list[list[list[int]]]:
    """Region rows for every database from one noise draw."""
    field = points.field
    q = field.q
    num_sub = len(model)
    degree = len(points.db_points) // 2
    alphas = points.db_points
    slots = points.slot_points
    y = region.y
    inv_cache = {
        (f, a): field.inv((f - a) % q) for f in set(slots) for a in alphas
    }
    shards: list[list[list[int]]] = [[] for _ in alphas]
    for p in range(region.bit_length):
        slot_point = slots[cyclic_index(p + 1, y) - 1]
        column = [model[m][region.bit_offset + p] for m in range(num_sub)]
        noise = [rng.vector(num_sub) for _ in range(degree)]
        for n_idx, alpha in enumerate(alphas):
            inv_c = inv_cache[(slot_point, alpha)]
            row = [w * inv_c % q for w in column]
            power = 1
            for vec in noise:
                for m in range(num_sub):
                    row[m] = (row[m] + power * vec[m]) % q
                power = power * alpha % q
            shards[n_idx].append(row)
    return shards


# -- reading -----------------------------------------------------------------


def gen_read_queries(
    submodel_index: int,
    num_submodels: int,
    pattern: SelectionPattern,
    points: EvalPoints,
    region: RegionPlan,
    db_index: int,
    rng: SymbolSource,
) -> ReadQuery:
    """Read query for one database (gamma_r patterns, reused cyclically)."""
    if not 1 <= submodel_index <= num_submodels:
        raise ProtocolError(f"submodel index {submodel_index} out of range")
    field = points.field
    alpha = points.db_points[db_index - 1]
    slot_grid = read_row_slot_points(points, region)
    rows = []
    for s in range(region.gamma_r):
        chosen = pattern.read_sets[s]
        for i in range(1, region.ell_r + 1):
            rows.append(
                read_query_row(
                    field,
                    num_submodels,
                    submodel_index,
                    i in chosen,
                    slot_grid[s][i - 1],
                    alpha,
                    rng.vector(num_submodels),
                )
            )
    return ReadQuery(rows)


def gen_read_queries_all(
    submodel_index: int,
    num_submodels: int,
    pattern: SelectionPattern,
    points: EvalPoints,
    region: RegionPlan,
    rng: SymbolSource,
) -> list[ReadQuery]:
    """Per-database read queries from one shared mask draw."""
    if not 1 <= submodel_index <= num_submodels:
        raise ProtocolError(f"submodel index {submodel_index} out of range")
    field = points.field
    slot_grid = read_row_slot_points(points, region)
    queries = [ReadQuery([]) for _ in points.db_points]
    for s in range(region.gamma_r):
        chosen = pattern.read_sets[s]
        for i in range(1, region.ell_r + 1):
            mask = rng.vector(num_submodels)
            for n_idx, alpha in enumerate(points.db_points):
                queries[n_idx].rows.append(
                    read_query_row(
                        field,
                        num_submodels,
                        submodel_index,
                        i in chosen,
                        slot_grid[s][i - 1],
                        alpha,
                        mask,
                    )
                )
    return queries


def answer_read(
    shard_rows: Sequence[Sequence[int]], query: ReadQuery, region: RegionPlan, q: int
) -> ReadAnswer:
    """Combine each read subpacket of the region into one symbol.

    The ``gamma_r`` query patterns are reused cyclically across the whole
    region.
    """
    ell = region.ell_r
    if len(query.rows) != region.gamma_r * ell:
        raise ProtocolError(
            f"read query has {len(query.rows)} rows, expected {region.gamma_r * ell}"
        )
    if len(shard_rows) != region.bit_length:
        raise ProtocolError("shard rows do not cover the region")
    symbols = []
    gamma = region.gamma_r
    for t in range(region.read_subpackets):
        q_base = (t % gamma) * ell
        p_base = t * ell
        acc = 0
        for i in range(ell):
            srow = shard_rows[p_base + i]
            qrow = query.rows[q_base + i]
            acc += sum(a * b for a, b in zip(srow, qrow))
        symbols.append(acc % q)
    return ReadAnswer(symbols)


def _read_decode_ops(
    pattern: SelectionPattern, points: EvalPoints, region: RegionPlan
):
    """Per pattern slot: selected indices, inverse of the square decode
    matrix over the first 2*floor(N/2) databases, and verification rows
    for any leftover databases."""
    field = points.field
    q = field.q
    half = len(points.db_points) // 2
    slot_grid = read_row_slot_points(points, region)
    ops = []
    for s in range(region.gamma_r):
        chosen = sorted(pattern.read_sets[s])
        phis = [slot_grid[s][i - 1] for i in chosen]
        rows = []
        for alpha in points.db_points:
            row = [field.inv((phi - alpha) % q) for phi in phis]
            row.extend(pow(alpha, j, q) for j in range(half + 1))
            rows.append(row)
        square = rows[: 2 * half]
        if len(square) != len(square[0]):
            raise CorruptionError("decode system is not square")
        ops.append((chosen, field.invert(square), rows[2 * half :]))
    return ops


def decode_read(
    answers: Sequence[ReadAnswer],
    pattern: SelectionPattern,
    points: EvalPoints,
    region: RegionPlan,
) -> tuple[list[int], list[bool]]:
    """Recover the selected model symbols of every subpacket.

    Returns region-length value and correctness-mask lists; unselected
    positions come back as 0 with a False mask (nothing was transferred
    for them).  With an odd database count the leftover answer must agree
    with the solved unknowns, otherwise the shards or answers are corrupt.
    """
    field = points.field
    q = field.q
    half = len(points.db_points) // 2
    if len(answers) != len(points.db_points):
        raise ProtocolError("answers from every database are required")
    nsub = region.read_subpackets
    for answer in answers:
        if len(answer.symbols) != nsub:
            raise ProtocolError("answer count does not match the region")
    ops = _read_decode_ops(pattern, points, region)
    values = [0] * region.bit_length
    correct = [False] * region.bit_length
    for t in range(nsub):
        chosen, inverse, extra_rows = ops[t % region.gamma_r]
        rhs = [answers[n].symbols[t] for n in range(2 * half)]
        solution = field.matvec(inverse, rhs)
        for row, answer in zip(extra_rows, answers[2 * half :]):
            predicted = sum(a * x for a, x in zip(row, solution)) % q
            if predicted != answer.symbols[t]:
                raise CorruptionError(
                    f"leftover answer disagrees at subpacket {t}"
                )
        base_p = t * region.ell_r
        for idx, i in enumerate(chosen):
            values[base_p + i - 1] = solution[idx]
            correct[base_p + i - 1] = True
    return values, correct


# -- writing -----------------------------------------------------------------


def gen_write_query(
    submodel_index: int,
    num_submodels: int,
    pattern: SelectionPattern,
    points: EvalPoints,
    region: RegionPlan,
    db_index: int,
    rng: SymbolSource,
) -> WriteQuery:
    """Write query for one database (gamma_w patterns, sent once)."""
    if not 1 <= submodel_index <= num_submodels:
        raise ProtocolError(f"submodel index {submodel_index} out of range")
    field = points.field
    alpha = points.db_points[db_index - 1]
    slot_grid = write_row_slot_points(points, region)
    rows = []
    for s in range(region.gamma_w):
        chosen = pattern.write_sets[s]
        for i in range(1, region.ell_w + 1):
            rows.append(
                write_query_row(
                    field,
                    num_submodels,
                    submodel_index,
                    i in chosen,
                    slot_grid[s][i - 1],
                    alpha,
                    rng.vector(num_submodels),
                )
            )
    return WriteQuery(rows)


def gen_write_query_all(
    submodel_index: int,
    num_submodels: int,
    pattern: SelectionPattern,
    points: EvalPoints,
    region: RegionPlan,
    rng: SymbolSource,
) -> list[WriteQuery]:
    """Per-database write queries from one shared mask draw."""
    if not 1 <= submodel_index <= num_submodels:
        raise ProtocolError(f"submodel index {submodel_index} out of range")
    field = points.field
    slot_grid = write_row_slot_points(points, region)
    queries = [WriteQuery([]) for _ in points.db_points]
    for s in range(region.gamma_w):
        chosen = pattern.write_sets[s]
        for i in range(1, region.ell_w + 1):
            mask = rng.vector(num_submodels)
            for n_idx, alpha in enumerate(points.db_points):
                queries[n_idx].rows.append(
                    write_query_row(
                        field,
                        num_submodels,
                        submodel_index,
                        i in chosen,
                        slot_grid[s][i - 1],
                        alpha,
                        mask,
                    )
                )
    return queries


def encode_update(
    deltas_per_subpacket: Sequence[Sequence[int]],
    pattern: SelectionPattern,
    points: EvalPoints,
    region: RegionPlan,
    db_index: int,
    rng: SymbolSource,
) -> UpdateSymbols:
    """Update symbols for one database, one per write subpacket.

    ``deltas_per_subpacket[t]`` lists the update values at the selected
    positions of subpacket t, ordered by ascending position index.  The
    noise scalar is drawn once per subpacket; equally-seeded sources
    across databases share the realization.
    """
    field = points.field
    alpha = points.db_points[db_index - 1]
    slot_grid = write_row_slot_points(points, region)
    if len(deltas_per_subpacket) != region.write_subpackets:
        raise ProtocolError("one delta group per write subpacket expected")
    symbols = []
    for t, deltas in enumerate(deltas_per_subpacket):
        s = t % region.gamma_w
        chosen = sorted(pattern.write_sets[s])
        slot_pts = [slot_grid[s][i - 1] for i in chosen]
        noise = rng.symbol()
        symbols.append(
            combined_update_symbol(field, deltas, slot_pts, alpha, noise)
        )
    return UpdateSymbols(symbols)


def encode_update_all(
    deltas_per_subpacket: Sequence[Sequence[int]],
    pattern: SelectionPattern,
    points: EvalPoints,
    region: RegionPlan,
    rng: SymbolSource,
) -> list[UpdateSymbols]:
    """Per-database update symbols from one shared noise draw."""
    field = points.field
    slot_grid = write_row_slot_points(points, region)
    if len(deltas_per_subpacket) != region.write_subpackets:
        raise ProtocolError("one delta group per write subpacket expected")
    out = [UpdateSymbols([]) for _ in points.db_points]
    for t, deltas in enumerate(deltas_per_subpacket):
        s = t % region.gamma_w
        chosen = sorted(pattern.write_sets[s])
        slot_pts = [slot_grid[s][i - 1] for i in chosen]
        noise = rng.symbol()
        for n_idx, alpha in enumerate(points.db_points):
            out[n_idx].symbols.append(
                combined_update_symbol(field, deltas, slot_pts, alpha, noise)
            )
    return out


def apply_update(
    shard_rows: list[list[int]],
    write_query: WriteQuery,
    updates: UpdateSymbols,
    region: RegionPlan,
    q: int,
) -> None:
    """Add update-symbol times query-row into the stored rows, in place.

    The write query is reused cyclically: subpacket t uses pattern slot
    t mod gamma_w.  Selected positions gain their update value under the
    mask; every other touched row changes only in its mask component.
    """
    ell = region.ell_w
    if len(write_query.rows) != region.gamma_w * ell:
        raise ProtocolError(
            f"write query has {len(write_query.rows)} rows, "
            f"expected {region.gamma_w * ell}"
        )
    if len(updates.symbols) != region.write_subpackets:
        raise ProtocolError("one update symbol per write subpacket expected")
    if len(shard_rows) != region.bit_length:
        raise ProtocolError("shard rows do not cover the region")
    gamma = region.gamma_w
    for t, u in enumerate(updates.symbols):
        q_base = (t % gamma) * ell
        p_base = t * ell
        for i in range(ell):
            row = shard_rows[p_base + i]
            qrow = write_query.rows[q_base + i]
            for m in range(len(row)):
                row[m] = (row[m] + u * qrow[m]) % q
