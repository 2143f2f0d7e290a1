"""Stateful protocol participants.

A DatabaseNode owns one noise-masked shard and serves the message tags of
the wire protocol; it never sees evaluation points, selection sets, or
plaintext.  A UserClient drives one full round against all N nodes: read
phase, write phase, then a commit barrier.  Nodes stage incremental
updates and apply them only on COMMIT, so a failed round leaves storage
untouched.

Costs are counted in field symbols normalized by the submodel length.
Per-round traffic is answers (downloads) and update symbols (uploads);
query payloads are one-time per round and region, independent of the
model length, and are reported separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from fractions import Fraction
from typing import Optional, Sequence

from . import codec
from .codec import (
    EvalPoints,
    ReadAnswer,
    ReadQuery,
    SelectionPattern,
    UpdateSymbols,
    WriteQuery,
)
from .errors import ProtocolError
from .field import PrimeField, SymbolSource
from .planner import Plan, RegionPlan
from .transport import Message, MessageTag


def _flatten(rows: Sequence[Sequence[int]]) -> list[int]:
    return [value for row in rows for value in row]


def _rows(flat: Sequence[int], width: int) -> list[list[int]]:
    if width <= 0 or len(flat) % width:
        raise ProtocolError(f"payload of {len(flat)} symbols is not rows of {width}")
    return [list(flat[i : i + width]) for i in range(0, len(flat), width)]


class DatabaseNode:
    """One database: a shard per region plus staged-write round state."""

    def __init__(self, db_index: int, field: PrimeField):
        self.db_index = db_index
        self.field = field
        self.num_submodels: Optional[int] = None
        self.regions: list[RegionPlan] = []
        self.rows_by_region: list[list[list[int]]] = []
        self.committed_round = 0
        self.active_round: Optional[int] = None
        self._staged_queries: dict[int, WriteQuery] = {}
        self._staged_updates: dict[int, UpdateSymbols] = {}

    # -- provisioning -------------------------------------------------------

    def install_storage(
        self,
        num_submodels: int,
        regions: Sequence[RegionPlan],
        rows_by_region: Sequence[Sequence[Sequence[int]]],
    ) -> None:
        if len(regions) != len(rows_by_region):
            raise ProtocolError("one row block per region expected")
        for region, rows in zip(regions, rows_by_region):
            if len(rows) != region.bit_length:
                raise ProtocolError("row count does not match region length")
            if any(len(row) != num_submodels for row in rows):
                raise ProtocolError("row width does not match submodel count")
        self.num_submodels = num_submodels
        self.regions = list(regions)
        self.rows_by_region = [[list(row) for row in rows] for rows in rows_by_region]
        self.committed_round = 0
        self.active_round = None
        self._staged_queries.clear()
        self._staged_updates.clear()

    # -- round state ----------------------------------------------------------

    def _enter_round(self, round_id: int) -> None:
        if self.active_round is None:
            if round_id <= self.committed_round:
                raise ProtocolError(
                    f"stale round {round_id} (committed {self.committed_round})"
                )
            self.active_round = round_id
        elif round_id != self.active_round:
            raise ProtocolError(
                f"round {round_id} does not match active round {self.active_round}"
            )

    def _region(self, region_id: int) -> RegionPlan:
        if not self.regions:
            raise ProtocolError("storage not provisioned")
        if not 0 <= region_id < len(self.regions):
            raise ProtocolError(f"unknown region {region_id}")
        return self.regions[region_id]

    # -- handlers ---------------------------------------------------------------

    def handle_read(self, round_id: int, region_id: int, query: ReadQuery) -> ReadAnswer:
        self._enter_round(round_id)
        region = self._region(region_id)
        return codec.answer_read(
            self.rows_by_region[region_id], query, region, self.field.q
        )

    def stage_write_query(self, round_id: int, region_id: int, query: WriteQuery) -> None:
        self._enter_round(round_id)
        region = self._region(region_id)
        if len(query.rows) != region.gamma_w * region.ell_w:
            raise ProtocolError("write query does not match region geometry")
        if any(len(row) != self.num_submodels for row in query.rows):
            raise ProtocolError("write query width does not match submodel count")
        self._staged_queries[region_id] = query

    def stage_updates(self, round_id: int, region_id: int, updates: UpdateSymbols) -> None:
        self._enter_round(round_id)
        region = self._region(region_id)
        if len(updates.symbols) != region.write_subpackets:
            raise ProtocolError("one update symbol per write subpacket expected")
        if region_id not in self._staged_queries:
            raise ProtocolError("update symbols arrived before their write query")
        self._staged_updates[region_id] = updates

    def commit(self, round_id: int) -> None:
        self._enter_round(round_id)
        if set(self._staged_queries) != set(self._staged_updates):
            raise ProtocolError("incomplete write staging at commit")
        for region_id, query in self._staged_queries.items():
            codec.apply_update(
                self.rows_by_region[region_id],
                query,
                self._staged_updates[region_id],
                self.regions[region_id],
                self.field.q,
            )
        self._finish_round(round_id)

    def abort(self, round_id: int) -> None:
        # Aborting an unknown or never-started round is a no-op by design.
        self._finish_round(max(round_id, self.committed_round))

    def _finish_round(self, round_id: int) -> None:
        self.committed_round = max(self.committed_round, round_id)
        self.active_round = None
        self._staged_queries.clear()
        self._staged_updates.clear()

    # -- transport glue -----------------------------------------------------------

    def dispatch(self, message: Message) -> Message:
        tag = message.tag
        rid, region_id = message.round_id, message.region_id
        if tag == MessageTag.INIT_STORAGE:
            self._install_from_payload(message.payload)
            return Message(MessageTag.ACK, rid, region_id)
        if tag == MessageTag.READ_QUERY:
            region = self._region(region_id)
            query = ReadQuery(_rows(message.payload, self._width()))
            answer = self.handle_read(rid, region_id, query)
            return Message(MessageTag.READ_ANSWER, rid, region_id, answer.symbols)
        if tag == MessageTag.WRITE_QUERY:
            self.stage_write_query(
                rid, region_id, WriteQuery(_rows(message.payload, self._width()))
            )
            return Message(MessageTag.ACK, rid, region_id)
        if tag == MessageTag.UPDATE_SYMBOLS:
            self.stage_updates(rid, region_id, UpdateSymbols(list(message.payload)))
            return Message(MessageTag.ACK, rid, region_id)
        if tag == MessageTag.COMMIT:
            self.commit(rid)
            return Message(MessageTag.ACK, rid, region_id)
        if tag == MessageTag.ABORT:
            self.abort(rid)
            return Message(MessageTag.ACK, rid, region_id)
        raise ProtocolError(f"unexpected tag {tag!r}")

    def _width(self) -> int:
        if self.num_submodels is None:
            raise ProtocolError("storage not provisioned")
        return self.num_submodels

    def _install_from_payload(self, payload: Sequence[int]) -> None:
        if len(payload) < 6:
            raise ProtocolError("short provisioning payload")
        q, db_index, _n, num_sub, padded, nregions = payload[:6]
        if q != self.field.q:
            raise ProtocolError(f"modulus mismatch: node {self.field.q}, init {q}")
        if db_index != self.db_index:
            raise ProtocolError("provisioning addressed to a different database")
        cursor = 6
        regions = []
        for _ in range(nregions):
            offset, length, ell_r, ell_w = payload[cursor : cursor + 4]
            regions.append(RegionPlan(offset, length, ell_r, ell_w))
            cursor += 4
        if sum(r.bit_length for r in regions) != padded:
            raise ProtocolError("regions do not tile the padded length")
        rows_by_region = []
        for region in regions:
            count = region.bit_length * num_sub
            block = payload[cursor : cursor + count]
            if len(block) != count:
                raise ProtocolError("provisioning payload truncated")
            rows_by_region.append(_rows(block, num_sub))
            cursor += count
        if cursor != len(payload):
            raise ProtocolError("trailing bytes in provisioning payload")
        self.install_storage(num_sub, regions, rows_by_region)


def init_payload(
    q: int,
    db_index: int,
    n_databases: int,
    num_submodels: int,
    regions: Sequence[RegionPlan],
    rows_by_region: Sequence[Sequence[Sequence[int]]],
) -> list[int]:
    """Provisioning payload consumed by DatabaseNode.dispatch."""
    padded = sum(r.bit_length for r in regions)
    payload = [q, db_index, n_databases, num_submodels, padded, len(regions)]
    for region in regions:
        payload.extend((region.bit_offset, region.bit_length, region.ell_r, region.ell_w))
    for rows in rows_by_region:
        payload.extend(_flatten(rows))
    return payload


@dataclass
class RoundTranscript:
    """Exact symbol counts for one round, all databases combined."""

    n_databases: int
    submodel_length: int
    downloaded_symbols: int = 0
    uploaded_symbols: int = 0
    read_query_symbols: int = 0
    write_query_symbols: int = 0

    @property
    def read_cost(self) -> Fraction:
        return Fraction(self.downloaded_symbols, self.submodel_length)

    @property
    def write_cost(self) -> Fraction:
        return Fraction(self.uploaded_symbols, self.submodel_length)

    @property
    def query_symbols(self) -> int:
        return self.read_query_symbols + self.write_query_symbols

    @property
    def query_symbols_per_db(self) -> int:
        return self.query_symbols // self.n_databases

    @property
    def query_overhead_fraction(self) -> Fraction:
        """One-time query traffic relative to per-round traffic."""
        return Fraction(
            self.query_symbols, self.downloaded_symbols + self.uploaded_symbols
        )


@dataclass
class RoundResult:
    round_id: int
    downloaded: list[int]
    correct_mask: list[bool]
    uploaded_deltas: list[int]
    transcript: RoundTranscript


class UserClient:
    """Plans queries, decodes answers, and uploads combined updates."""

    def __init__(
        self,
        channel,
        plan: Plan,
        points: EvalPoints,
        submodel_index: int,
        patterns: Sequence[SelectionPattern],
        rng: SymbolSource,
    ):
        if len(patterns) != len(plan.regions):
            raise ProtocolError("one selection pattern per region expected")
        base = plan.base
        for region, pattern in zip(plan.regions, patterns):
            pattern.validate(region, base)
        if points.n_databases != plan.n_databases:
            raise ProtocolError("evaluation points do not match the plan")
        if not 1 <= submodel_index <= plan.num_submodels:
            raise ProtocolError(f"submodel index {submodel_index} out of range")
        self.channel = channel
        self.plan = plan
        self.points = points
        self.submodel_index = submodel_index
        self.patterns = list(patterns)
        self.rng = rng
        self.last_round = 0

    def _send(self, db_index: int, message: Message) -> Message:
        reply = self.channel.send(db_index, message)
        if reply.tag == MessageTag.ERROR:
            code = reply.payload[0] if reply.payload else 0
            raise ProtocolError(f"database {db_index} reported error code {code}")
        return reply

    def _abort_all(self, round_id: int) -> None:
        for db in range(1, self.plan.n_databases + 1):
            try:
                self.channel.send(db, Message(MessageTag.ABORT, round_id, 0))
            except Exception:
                pass  # best effort: surviving nodes drop their staging

    def run_round(self, deltas: Sequence[int]) -> RoundResult:
        """Read the target submodel, then write the given updates.

        ``deltas`` holds one update value per model position; positions
        outside the selection sets are not uploaded.  Any node failure
        aborts the round on all databases before the error propagates.
        """
        plan = self.plan
        if len(deltas) != plan.submodel_length:
            raise ProtocolError("one update value per model position expected")
        round_id = self.last_round + 1
        try:
            result = self._run(round_id, deltas)
        except Exception:
            self._abort_all(round_id)
            raise
        self.last_round = round_id
        return result

    def _run(self, round_id: int, deltas: Sequence[int]) -> RoundResult:
        plan = self.plan
        n = plan.n_databases
        m = plan.num_submodels
        length = plan.submodel_length
        transcript = RoundTranscript(n, length)
        downloaded = [0] * length
        mask = [False] * length
        region_values: list[tuple[RegionPlan, list[int], list[bool]]] = []

        # Read phase: per region, one query per database, answers decoded
        # across all databases.
        for region_id, region in enumerate(plan.regions):
            pattern = self.patterns[region_id]
            queries = codec.gen_read_queries_all(
                self.submodel_index, m, pattern, self.points, region, self.rng
            )
            answers: list[ReadAnswer] = []
            for db in range(1, n + 1):
                payload = _flatten(queries[db - 1].rows)
                transcript.read_query_symbols += len(payload)
                reply = self._send(
                    db, Message(MessageTag.READ_QUERY, round_id, region_id, payload)
                )
                if reply.tag != MessageTag.READ_ANSWER:
                    raise ProtocolError(f"database {db} sent {reply.tag!r} to a read")
                transcript.downloaded_symbols += len(reply.payload)
                answers.append(ReadAnswer(list(reply.payload)))
            values, correct = codec.decode_read(answers, pattern, self.points, region)
            region_values.append((region, values, correct))

        for region, values, correct in region_values:
            stop = min(region.bit_length, length - region.bit_offset)
            for p in range(max(0, stop)):
                downloaded[region.bit_offset + p] = values[p]
                mask[region.bit_offset + p] = correct[p]

        # Write phase: queries once per region, one symbol per subpacket.
        padded_deltas = list(deltas) + [0] * (plan.padded_length - length)
        uploaded = [0] * length
        for region_id, region in enumerate(plan.regions):
            pattern = self.patterns[region_id]
            write_queries = codec.gen_write_query_all(
                self.submodel_index, m, pattern, self.points, region, self.rng
            )
            groups: list[list[int]] = []
            for t in range(region.write_subpackets):
                chosen = sorted(pattern.write_sets[t % region.gamma_w])
                group = []
                for i in chosen:
                    p_global = region.bit_offset + t * region.ell_w + i - 1
                    value = padded_deltas[p_global]
                    group.append(value)
                    if p_global < length:
                        uploaded[p_global] = value
                groups.append(group)
            updates = codec.encode_update_all(
                groups, pattern, self.points, region, self.rng
            )
            for db in range(1, n + 1):
                payload = _flatten(write_queries[db - 1].rows)
                transcript.write_query_symbols += len(payload)
                self._send(
                    db, Message(MessageTag.WRITE_QUERY, round_id, region_id, payload)
                )
                symbols = updates[db - 1].symbols
                transcript.uploaded_symbols += len(symbols)
                self._send(
                    db,
                    Message(
                        MessageTag.UPDATE_SYMBOLS, round_id, region_id, list(symbols)
                    ),
                )

        for db in range(1, n + 1):
            self._send(db, Message(MessageTag.COMMIT, round_id, 0))

        return RoundResult(round_id, downloaded, mask, uploaded, transcript)
