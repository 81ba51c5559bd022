"""Per-message communication accounting."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

COMPONENTS = ("online_net", "predictor", "target_net", "features", "scalar")
DIRECTIONS = ("up", "down")
SCALAR_BYTES = 8
LEDGER_COLUMNS = ("round", "client", "direction", "component", "bytes")


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    client: int
    direction: str
    component: str
    bytes: int


class CommLedger:
    """Append-only list of messages between the server and clients.

    ``client`` is the sender for uploads and the receiver for downloads.
    """

    def __init__(self, entries=()):
        self.entries: list[LedgerEntry] = []
        for e in entries:
            self.record(e.round, e.client, e.direction, e.component, e.bytes)

    def record(self, round: int, client: int, direction: str, component: str, nbytes: int) -> None:
        if direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {direction!r}")
        if component not in COMPONENTS:
            raise ValueError(f"unknown component {component!r}")
        if nbytes < 0:
            raise ValueError("byte count must be non-negative")
        self.entries.append(LedgerEntry(int(round), int(client), direction, component, int(nbytes)))

    def __len__(self) -> int:
        return len(self.entries)

    def total(self, *, round=None, direction=None, component=None, client=None) -> int:
        return sum(
            e.bytes
            for e in self.entries
            if (round is None or e.round == round)
            and (direction is None or e.direction == direction)
            and (component is None or e.component == component)
            and (client is None or e.client == client)
        )

    def by_component(self) -> dict[str, int]:
        out = dict.fromkeys(COMPONENTS, 0)
        for e in self.entries:
            out[e.component] += e.bytes
        return out

    def by_round(self) -> dict[int, int]:
        out: dict[int, int] = defaultdict(int)
        for e in self.entries:
            out[e.round] += e.bytes
        return dict(out)

    def rounds(self) -> list[int]:
        return sorted({e.round for e in self.entries})

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LEDGER_COLUMNS)
            for e in self.entries:
                w.writerow((e.round, e.client, e.direction, e.component, e.bytes))

    @classmethod
    def from_csv(cls, path) -> CommLedger:
        with open(Path(path), newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != LEDGER_COLUMNS:
                raise ValueError(f"{path}: unexpected ledger columns {reader.fieldnames}")
            return cls(
                LedgerEntry(int(r["round"]), int(r["client"]), r["direction"], r["component"], int(r["bytes"]))
                for r in reader
            )
