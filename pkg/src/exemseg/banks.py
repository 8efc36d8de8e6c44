"""Exemplar bank and per-lesion segmentation memory.

The exemplar bank is a bounded store of lesion appearance records shared
across all lesions of a session. Each exemplar keeps a visual feature
grid, a positional encoding of the mask centroid, the slice index it was
taken from, whether a user prompt produced it, and an object pointer
vector. Replacement favours prompted entries:

  1. below capacity: append;
  2. inserting a prompted exemplar into a full bank evicts the oldest
     non-prompted entry if one exists;
  3. otherwise the oldest entry with the same prompted flag is evicted;
     a non-prompted exemplar offered to an all-prompted full bank is
     discarded.

"Oldest" always means smallest insertion counter; updates re-stamp the
counter, moving the entry to the newest rank. A bank holds at most one
exemplar per (lesion, slice) pair.

The memory bank is per lesion: prompted entries are pinned, non-prompted
entries form a FIFO window filling the remaining capacity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass
class Exemplar:
    lesion_id: int
    slice_index: int
    prompted: bool
    z: np.ndarray              # visual feature grid (G, G, C)
    pos: np.ndarray            # centroid positional encoding (C,)
    pointer: np.ndarray        # object pointer (C,)
    insertion_counter: int = 0


class ExemplarBank:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"exemplar bank: capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.entries: list[Exemplar] = []
        self._counter = 0

    def __len__(self) -> int:
        return len(self.entries)

    def _stamp(self) -> int:
        self._counter += 1
        return self._counter

    def find(self, lesion_id: int, slice_index: int) -> Exemplar | None:
        for e in self.entries:
            if e.lesion_id == lesion_id and e.slice_index == slice_index:
                return e
        return None

    def insert(self, exemplar: Exemplar) -> bool:
        """Offer a new exemplar; returns True if it was retained.

        Raises if an exemplar for the same (lesion, slice) already exists;
        callers wanting refresh semantics use `update` or `upsert`.
        """
        if self.find(exemplar.lesion_id, exemplar.slice_index) is not None:
            raise ValueError(
                f"exemplar bank: duplicate entry for lesion {exemplar.lesion_id} "
                f"slice {exemplar.slice_index}")
        e = replace(exemplar, insertion_counter=self._stamp())
        if len(self.entries) < self.capacity:
            self.entries.append(e)
            return True
        if e.prompted:
            victims = [x for x in self.entries if not x.prompted]
            if not victims:
                victims = [x for x in self.entries if x.prompted]
        else:
            victims = [x for x in self.entries if not x.prompted]
            if not victims:
                return False   # full bank of prompted entries outranks a propagated one
        oldest = min(victims, key=lambda x: x.insertion_counter)
        self.entries.remove(oldest)
        self.entries.append(e)
        return True

    def update(self, lesion_id: int, slice_index: int, z: np.ndarray | None = None,
               pos: np.ndarray | None = None, pointer: np.ndarray | None = None,
               from_clicks: bool = False) -> Exemplar:
        """Refresh an existing exemplar in place.

        The entry moves to the newest recency rank. A click-driven refresh
        promotes the prompted flag; the flag never drops back.
        """
        e = self.find(lesion_id, slice_index)
        if e is None:
            raise KeyError(f"exemplar bank: no entry for lesion {lesion_id} slice {slice_index}")
        if z is not None:
            e.z = z
        if pos is not None:
            e.pos = pos
        if pointer is not None:
            e.pointer = pointer
        if from_clicks:
            e.prompted = True
        e.insertion_counter = self._stamp()
        self.entries.remove(e)
        self.entries.append(e)
        return e

    def upsert(self, exemplar: Exemplar, from_clicks: bool = False) -> bool:
        """Insert, or refresh the existing (lesion, slice) entry."""
        if self.find(exemplar.lesion_id, exemplar.slice_index) is not None:
            self.update(exemplar.lesion_id, exemplar.slice_index, z=exemplar.z,
                        pos=exemplar.pos, pointer=exemplar.pointer, from_clicks=from_clicks)
            return True
        return self.insert(exemplar)

    def select_context(self, current_slice: int, limit: int | None = None) -> list[Exemplar]:
        """Exemplars ordered by slice proximity to `current_slice`.

        Ties break prompted-first, then newer insertion. Pure: the bank is
        not modified. `limit` defaults to the bank capacity.
        """
        limit = self.capacity if limit is None else limit
        ranked = sorted(self.entries,
                        key=lambda e: (abs(e.slice_index - current_slice),
                                       0 if e.prompted else 1,
                                       -e.insertion_counter))
        return ranked[:limit]

    # -- snapshot support -------------------------------------------------------

    def to_state(self) -> dict:
        return {
            "capacity": self.capacity,
            "counter": self._counter,
            "entries": [{
                "lesion_id": e.lesion_id, "slice_index": e.slice_index,
                "prompted": e.prompted, "insertion_counter": e.insertion_counter,
                "z": e.z, "pos": e.pos, "pointer": e.pointer,
            } for e in self.entries],
        }

    @classmethod
    def from_state(cls, state: dict) -> "ExemplarBank":
        bank = cls(state["capacity"])
        bank._counter = state["counter"]
        for d in state["entries"]:
            bank.entries.append(Exemplar(
                lesion_id=d["lesion_id"], slice_index=d["slice_index"],
                prompted=d["prompted"], z=np.asarray(d["z"]),
                pos=np.asarray(d["pos"]), pointer=np.asarray(d["pointer"]),
                insertion_counter=d["insertion_counter"]))
        return bank


@dataclass
class MemoryEntry:
    slice_index: int
    prompted: bool
    feature: np.ndarray                 # (G, G, C)
    pointer: np.ndarray | None = None   # object pointer from the producing decode
    counter: int = 0


class MemoryBank:
    """Per-lesion decode memory: pinned prompted entries + recent FIFO window."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"memory bank: capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.entries: list[MemoryEntry] = []
        self._counter = 0

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, entry: MemoryEntry) -> None:
        """Add an entry; re-decoding a slice replaces its previous entry.

        Prompted entries are never evicted. Non-prompted entries keep only
        the most recent capacity - (pinned count) items.
        """
        self._counter += 1
        entry = replace(entry, counter=self._counter)
        self.entries = [e for e in self.entries
                        if not (e.slice_index == entry.slice_index and e.prompted == entry.prompted)]
        self.entries.append(entry)
        pinned = sum(1 for e in self.entries if e.prompted)
        room = max(self.capacity - pinned, 0)
        floating = [e for e in self.entries if not e.prompted]
        if len(floating) > room:
            floating.sort(key=lambda e: e.counter)
            drop = {id(e) for e in floating[:len(floating) - room]}
            self.entries = [e for e in self.entries if id(e) not in drop]

    def clear_non_prompted(self) -> None:
        self.entries = [e for e in self.entries if e.prompted]

    def prompted_entries(self) -> list[MemoryEntry]:
        return [e for e in self.entries if e.prompted]

    def ordered(self) -> list[MemoryEntry]:
        """Attention order: prompted by slice, then the rest newest-first."""
        pinned = sorted((e for e in self.entries if e.prompted), key=lambda e: e.slice_index)
        floating = sorted((e for e in self.entries if not e.prompted),
                          key=lambda e: -e.counter)
        return pinned + floating

    def latest_pointer(self) -> np.ndarray | None:
        """Most recent prompted pointer, else the most recent pointer of any kind."""
        with_ptr = [e for e in self.entries if e.pointer is not None]
        prompted = [e for e in with_ptr if e.prompted]
        pool = prompted if prompted else with_ptr
        if not pool:
            return None
        return max(pool, key=lambda e: e.counter).pointer

    def to_state(self) -> dict:
        return {
            "capacity": self.capacity,
            "counter": self._counter,
            "entries": [{
                "slice_index": e.slice_index, "prompted": e.prompted,
                "feature": e.feature, "pointer": e.pointer, "counter": e.counter,
            } for e in self.entries],
        }

    @classmethod
    def from_state(cls, state: dict) -> "MemoryBank":
        bank = cls(state["capacity"])
        bank._counter = state["counter"]
        for d in state["entries"]:
            bank.entries.append(MemoryEntry(
                slice_index=d["slice_index"], prompted=d["prompted"],
                feature=np.asarray(d["feature"]),
                pointer=None if d["pointer"] is None else np.asarray(d["pointer"]),
                counter=d["counter"]))
        return bank
