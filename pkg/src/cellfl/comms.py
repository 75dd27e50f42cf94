"""Wire-size model for model transfers and the per-round communication ledger.

Values are float32 on the wire. A dense transfer carries every weight and
bias. A sparse transfer carries the kept weights, a one-bit-per-weight mask
bitmap, and every bias. Megabytes are decimal (bytes / 1e6).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

from .errors import UsageError

VALUE_BYTES = 4


@dataclass(frozen=True)
class PayloadDescriptor:
    kind: str  # "dense" | "sparse"
    param_count: int
    kept_count: int
    bias_count: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("dense", "sparse"):
            raise UsageError(f"payload kind must be dense or sparse, got {self.kind!r}")
        if not 0 <= self.kept_count <= self.param_count:
            raise UsageError(f"kept_count {self.kept_count} outside [0, {self.param_count}]")
        if self.kind == "dense" and self.kept_count != self.param_count:
            raise UsageError("a dense payload keeps every parameter")

    @classmethod
    def dense(cls, d: int, bias_count: int = 0) -> "PayloadDescriptor":
        return cls("dense", d, d, bias_count)

    @classmethod
    def sparse(cls, d: int, kept: int, bias_count: int = 0) -> "PayloadDescriptor":
        return cls("sparse", d, kept, bias_count)

    @property
    def bytes(self) -> int:
        return payload_bytes(self)


def payload_bytes(desc: PayloadDescriptor) -> int:
    if desc.kind == "dense":
        return VALUE_BYTES * (desc.param_count + desc.bias_count)
    return (
        VALUE_BYTES * desc.kept_count
        + math.ceil(desc.param_count / 8)
        + VALUE_BYTES * desc.bias_count
    )


@dataclass(frozen=True)
class LedgerRow:
    round: int
    protocol: str
    ul_bytes: int
    dl_bytes: int
    ul_messages: int
    dl_messages: int
    cum_ul_bytes: int
    cum_dl_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.ul_bytes + self.dl_bytes

    @property
    def cum_bytes(self) -> int:
        return self.cum_ul_bytes + self.cum_dl_bytes


@dataclass
class CommLedger:
    protocol: str
    rows: list[LedgerRow] = field(default_factory=list)

    @property
    def last_round(self) -> int:
        return self.rows[-1].round if self.rows else 0

    @property
    def cumulative_ul(self) -> int:
        return self.rows[-1].cum_ul_bytes if self.rows else 0

    @property
    def cumulative_dl(self) -> int:
        return self.rows[-1].cum_dl_bytes if self.rows else 0

    @property
    def cumulative(self) -> int:
        return self.cumulative_ul + self.cumulative_dl

    def _append(self, rnd: int, ul: list[int], dl: list[int]) -> LedgerRow:
        if rnd <= self.last_round:
            raise UsageError(f"round {rnd} recorded after round {self.last_round}")
        ul_b, dl_b = sum(ul), sum(dl)
        row = LedgerRow(
            round=rnd,
            protocol=self.protocol,
            ul_bytes=ul_b,
            dl_bytes=dl_b,
            ul_messages=len(ul),
            dl_messages=len(dl),
            cum_ul_bytes=self.cumulative_ul + ul_b,
            cum_dl_bytes=self.cumulative_dl + dl_b,
        )
        self.rows.append(row)
        return row

    def record_idle(self, rnd: int) -> LedgerRow:
        """A round in which nothing was transmitted (standalone training)."""
        return self._append(rnd, [], [])


def record_round(
    ledger: CommLedger,
    rnd: int,
    ul_list: Iterable[PayloadDescriptor],
    dl_list: Iterable[PayloadDescriptor],
) -> CommLedger:
    """Append one round of uplink and downlink transfers to ``ledger``.

    A broadcast counts once in ``dl_list`` however many users receive it.
    """
    ul = [payload_bytes(p) for p in ul_list]
    dl = [payload_bytes(p) for p in dl_list]
    if not ul:
        raise UsageError(f"round {rnd}: no uplink transfers (empty participant list)")
    ledger._append(rnd, ul, dl)
    return ledger


def to_megabytes(n_bytes: int) -> float:
    return n_bytes / 1e6
