"""Resident model bank: fixed slots, constant-time resolution, atomic swap.

All slots are loaded up front and share one (d, h) shape so a single
executor serves every packet; per-packet switching is nothing more than
resolving the slot index carried in reg0. Slot content can be replaced at
runtime (whole-reference swap), and readers always observe exactly one
coherent model version.
"""

from __future__ import annotations

import threading
from typing import Sequence

from .bnn import (
    DEFAULT_INPUT_BITS,
    DimensionMismatch,
    ModelWeights,
    SizeMismatch,
    load_model,
    serialized_size,
)
from .packet_format import Reg0Metadata


class EmptyBank(ValueError):
    """A bank needs at least one slot."""


class SlotOutOfRange(LookupError):
    """slot_id does not name a resident slot."""


class ModelBank:
    """K resident ModelWeights slots behind one execution interface.

    Readers resolve and index `slots` without locking; swap_slot replaces
    one slot reference atomically, so a concurrent reader sees the old
    model or the new one, never a mixture.
    """

    def __init__(self, models: Sequence[ModelWeights]):
        if not models:
            raise EmptyBank("no models given")
        d, h = models[0].d, models[0].h
        for i, m in enumerate(models):
            if (m.d, m.h) != (d, h):
                raise DimensionMismatch(
                    f"slot {i} is (d={m.d}, h={m.h}), bank is (d={d}, h={h})")
        self.slots: list[ModelWeights] = list(models)
        self.d = d
        self.h = h
        self.generation = 0
        self._swap_lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def footprint_bytes(self) -> int:
        return serialized_size(self.d, self.h) * len(self.slots)

    def resolve(self, meta: Reg0Metadata) -> int:
        """Slot index for a packet's metadata: the slot_id itself after one
        bounds check. Constant time, independent of bank size."""
        k = meta.slot_id
        if k >= len(self.slots):
            raise SlotOutOfRange(k)
        return k

    def swap_slot(self, k: int, new_model: ModelWeights) -> None:
        """Replace slot k; takes effect atomically for subsequent resolutions."""
        if not 0 <= k < len(self.slots):
            raise SlotOutOfRange(k)
        if (new_model.d, new_model.h) != (self.d, self.h):
            raise DimensionMismatch(
                f"new model is (d={new_model.d}, h={new_model.h}), "
                f"bank is (d={self.d}, h={self.h})")
        with self._swap_lock:
            self.slots[k] = new_model
            self.generation += 1

    def info(self) -> dict:
        return {
            "slots": len(self.slots),
            "d": self.d,
            "h": self.h,
            "generation": self.generation,
            "footprint_bytes": self.footprint_bytes,
        }


def load_bank(paths: Sequence[str], *, d: int = DEFAULT_INPUT_BITS,
              h: int | None = None) -> ModelBank:
    """Load one model per path into a bank, in argument order.

    Weight files are headerless, so each file's hidden width is derived
    from its size for the given d when h is not forced; slots whose widths
    disagree are rejected.
    """
    if not paths:
        raise EmptyBank("no model files given")
    models = []
    for path in paths:
        models.append(load_model(path, d=d, h=h if h is not None
                                 else _infer_hidden(path, d)))
    widths = {m.h for m in models}
    if len(widths) != 1:
        raise DimensionMismatch(f"mixed hidden widths across slots: {sorted(widths)}")
    return ModelBank(models)


def _infer_hidden(path: str, d: int) -> int:
    import os

    size = os.path.getsize(path)
    per_unit = d // 8 + 1 + 4
    if size < 4 or (size - 4) % per_unit != 0:
        raise SizeMismatch(
            f"{path}: {size} bytes does not match any hidden width for d={d}")
    return (size - 4) // per_unit
