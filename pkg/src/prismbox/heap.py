"""Simulated allocator over a sparse 47-bit address space.

Small objects bump-allocate inside 64KB frames; large objects live in
fixed-slot 4GB frames with pre-padding so the end address is 64KB-aligned.
Every allocation stores its start address in the 8 bytes at EA+q (except
pow2 mode, which checks bounds by XOR and never reads SA back).
Memory is materialized lazily as 64KB pages; touching an unmapped page is
a SimFault, i.e. a sandbox bug rather than a guest-program bug.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .tagging import (
    ADDR_MASK,
    FrameClass,
    Mode,
    encode_ea32,
    encode_pow2,
    encode_prism,
)

PAGE = 1 << 16
LOW_GUARD = 1 << 22                 # first 4MB is never mapped
MAX_ALLOC = (1 << 32) - (1 << 16)   # 4GB - 64KB

SMALL_BASE = 1 << 32
LARGE_BASE = 1 << 33
POW2_BASE = 1 << 35
STACK_BASE = 1 << 34
BASE32 = 1 << 30


class SimFault(Exception):
    """Access to unmapped simulated memory; indicates a sandbox bug."""


class AllocError(Exception):
    pass


class FreeError(Exception):
    pass


def _align_up(value: int, align: int) -> int:
    return (value + align - 1) & ~(align - 1)


def _next_pow2(value: int) -> int:
    return 1 << max(0, (value - 1).bit_length())


@dataclass
class AllocationRecord:
    """Exact oracle-side record of one allocation."""

    sa: int
    ea: int
    request_size: int
    q: int
    mode: Mode
    live: bool = True
    tagged: int = 0
    aligned_size: int | None = None   # pow2 mode only
    region: tuple[int, int] = (0, 0)  # reserved span, headers/padding included
    kind: str = "heap"                # heap | stack | global


@dataclass
class _LargeFrame:
    base: int
    slot_size: int
    next_slot: int = 0
    slot_cap: int = 0


class SimMemory:
    """One sandbox instance: pages, frames, and the allocation records.

    materialize=False skips the byte buffers (layout bookkeeping only);
    useful for bulk layout sweeps where nothing reads memory back.
    """

    def __init__(self, mode: Mode, materialize: bool = True):
        self.mode = mode
        self.q = mode.q
        self.materialize = materialize
        self.pages: dict[int, bytearray] = {}
        self.records: list[AllocationRecord] = []
        self._by_sa: dict[int, AllocationRecord] = {}
        # Allocator cursors.
        self._small_frame: int | None = None
        self._small_bump = 0
        self._next_small = SMALL_BASE
        self._large_frames: dict[int, _LargeFrame] = {}
        self._next_large = LARGE_BASE
        self._pow2_bump = POW2_BASE
        self._bump32 = BASE32
        self.stack_ptr = STACK_BASE
        self._stack_limit = STACK_BASE + (1 << 32)

    # ------------------------------------------------------------------ pages

    def map_range(self, start: int, end: int) -> None:
        if start < LOW_GUARD:
            raise AllocError(f"mapping below the 4MB guard: {start:#x}")
        if not self.materialize:
            return
        for base in range(start & ~(PAGE - 1), end, PAGE):
            if base not in self.pages:
                self.pages[base] = bytearray(PAGE)

    def read(self, addr: int, length: int) -> bytes:
        if length < 0:
            raise SimFault(f"negative read length {length}")
        out = bytearray()
        pos = addr
        while pos < addr + length:
            base = pos & ~(PAGE - 1)
            page = self.pages.get(base)
            if page is None:
                raise SimFault(f"read of unmapped address {pos:#x}")
            off = pos - base
            take = min(PAGE - off, addr + length - pos)
            out += page[off:off + take]
            pos += take
        return bytes(out)

    def write(self, addr: int, data: bytes) -> None:
        pos = addr
        i = 0
        while i < len(data):
            base = pos & ~(PAGE - 1)
            page = self.pages.get(base)
            if page is None:
                raise SimFault(f"write to unmapped address {pos:#x}")
            off = pos - base
            take = min(PAGE - off, len(data) - i)
            page[off:off + take] = data[i:i + take]
            pos += take
            i += take

    def read_sa(self, ea: int) -> int:
        return int.from_bytes(self.read(ea + self.q, 8), "little")

    def _store_sa(self, record: AllocationRecord) -> None:
        if self.materialize:
            self.write(record.ea + self.q, record.sa.to_bytes(8, "little"))

    # ------------------------------------------------------------ allocation

    def alloc(self, size: int) -> int:
        """Mode-dispatching allocation; returns the tagged start address."""
        if not 1 <= size <= MAX_ALLOC:
            raise AllocError(f"size {size} out of range [1, {MAX_ALLOC}]")
        if self.mode.kind == "pow2":
            return self.alloc_pow2(size)
        if self.mode.kind == "prism32":
            return self.alloc_32(size)
        if size + self.q + 8 <= PAGE:
            return self.alloc_small(size)
        return self.alloc_large(size)

    def alloc_small(self, size: int) -> int:
        reserve = size + self.q + 8
        if reserve > PAGE:
            raise AllocError(f"small allocation of {size} does not fit a frame")
        if self._small_frame is None or self._small_bump + reserve > PAGE:
            self._small_frame = self._next_small
            self._next_small += PAGE
            self._small_bump = 0
            self.map_range(self._small_frame, self._small_frame + PAGE)
        sa = self._small_frame + self._small_bump
        ea = sa + size
        self._small_bump = _align_up(self._small_bump + reserve, 8)
        tagged = encode_prism(sa, ea, FrameClass.SMALL)
        return self._record(sa, ea, size, tagged, (sa, ea + self.q + 8))

    def alloc_large(self, size: int) -> int:
        need = size + self.q + 8
        slot = _align_up(need, PAGE)
        frame = self._large_frames.get(slot)
        if frame is None or frame.next_slot >= frame.slot_cap:
            if self._next_large + (1 << 32) > ADDR_MASK:
                raise AllocError("large-frame address space exhausted")
            # The last slot is kept free so the final object's SA store at
            # EA+q stays inside the frame.
            frame = _LargeFrame(self._next_large, slot,
                                slot_cap=(1 << 32) // slot - 1)
            self._large_frames[slot] = frame
            self._next_large += 1 << 32
        y = frame.base + frame.next_slot * slot
        frame.next_slot += 1
        sa = y + slot - size
        ea = y + slot
        self.map_range(sa, ea + self.q + 8)
        tagged = encode_prism(sa, ea, FrameClass.LARGE)
        return self._record(sa, ea, size, tagged, (y, ea))

    def alloc_pow2(self, size: int) -> int:
        if size < 0:
            raise AllocError("pow2 allocation needs size >= 0")
        aligned = _next_pow2(size + 1)
        if aligned.bit_length() - 1 > 46 or self._pow2_bump + aligned > ADDR_MASK:
            raise AllocError(f"pow2 allocation of {size} exceeds the budget")
        reserve = aligned if self.q == 0 else aligned + self.q - 1
        sa = _align_up(self._pow2_bump, aligned)
        self._pow2_bump = sa + reserve
        self.map_range(sa, sa + reserve)
        ea = sa + size
        tagged = encode_pow2(sa, aligned.bit_length() - 1)
        rec = self._record(sa, ea, size, tagged, (sa, sa + reserve),
                           store_sa=False)
        self._by_sa[sa].aligned_size = aligned
        return rec

    def alloc_32(self, size: int) -> int:
        if size < 0:
            raise AllocError("allocation needs size >= 0")
        sa = _align_up(self._bump32, 8)
        ea = sa + size
        if ea + self.q + 8 >= 1 << 32:
            raise AllocError("32-bit address space exhausted")
        self._bump32 = ea + self.q + 8
        self.map_range(sa, ea + self.q + 8)
        tagged = encode_ea32(sa, ea)
        return self._record(sa, ea, size, tagged, (sa, ea + self.q + 8))

    def alloc_stack_escaped(self, size: int, kind: str = "stack") -> int:
        """Escaped fixed-size stack object (or a global) with metadata attached."""
        if self.mode.kind == "prism32":
            return self._stack_record(self.alloc_32(size), kind)
        if self.mode.kind == "pow2":
            return self._stack_record(self.alloc_pow2(size), kind)
        if size + 8 <= PAGE:
            z = _next_pow2(size + 1)
            sa = _align_up(self.stack_ptr, z)
            ea = sa + size
            tagged = encode_prism(sa, ea, FrameClass.SMALL)
        else:
            asize = _align_up(size, PAGE)
            y = _align_up(self.stack_ptr, PAGE)
            sa = y + asize - size
            ea = y + asize
            tagged = encode_prism(sa, ea, FrameClass.LARGE)
        end = ea + self.q + 8
        if end > self._stack_limit:
            raise AllocError("stack space exhausted")
        self.map_range(min(sa, self.stack_ptr), end)
        self.stack_ptr = _align_up(end, 8)
        rec_tag = self._record(sa, ea, size, tagged, (sa, end))
        return self._stack_record(rec_tag, kind)

    def alloc_stack_dynamic(self, size: int) -> int:
        """Runtime-sized alloca: realign to 64KB only when the object straddles."""
        if self.mode.kind in ("prism32", "pow2"):
            return self._stack_record(self.alloc_pow2(size) if
                                      self.mode.kind == "pow2" else
                                      self.alloc_32(size), "stack")
        ptr = _align_up(self.stack_ptr, 8)
        if (ptr ^ (ptr + size)) >= PAGE:
            asize = _align_up(size, PAGE)
            y = _align_up(self.stack_ptr, PAGE)
            sa = y + asize - size
            ea = y + asize
            tagged = encode_prism(sa, ea, FrameClass.LARGE)
        else:
            sa = ptr
            ea = sa + size
            tagged = encode_prism(sa, ea, FrameClass.SMALL)
        end = ea + self.q + 8
        if end > self._stack_limit:
            raise AllocError("stack space exhausted")
        self.map_range(min(sa, self.stack_ptr), end)
        self.stack_ptr = _align_up(end, 8)
        rec_tag = self._record(sa, ea, size, tagged, (sa, end))
        return self._stack_record(rec_tag, "stack")

    def _stack_record(self, tagged: int, kind: str) -> int:
        self._by_sa[self.mode.strip(tagged)].kind = kind
        return tagged

    def _record(self, sa: int, ea: int, size: int, tagged: int,
                region: tuple[int, int], store_sa: bool = True) -> int:
        rec = AllocationRecord(sa=sa, ea=ea, request_size=size, q=self.q,
                               mode=self.mode, tagged=tagged, region=region)
        self.records.append(rec)
        self._by_sa[sa] = rec
        if store_sa:
            self._store_sa(rec)
        return tagged

    # ------------------------------------------------------------------ free

    def free(self, tagged: int) -> None:
        sa = self.mode.strip(tagged)
        rec = self._by_sa.get(sa)
        if rec is None:
            raise FreeError(f"free of unknown address {sa:#x}")
        if not rec.live:
            raise FreeError(f"double free of {sa:#x}")
        rec.live = False

    def stack_mark(self) -> tuple[int, int]:
        """Opaque frame mark for release_stack."""
        return (self.stack_ptr, len(self.records))

    def release_stack(self, mark: tuple[int, int]) -> None:
        """Pop stack allocations made since `mark` (from stack_mark)."""
        stack_ptr, nrecords = mark
        for rec in self.records[nrecords:]:
            if rec.kind == "stack" and rec.live:
                rec.live = False
        self.stack_ptr = stack_ptr

    # ---------------------------------------------------------------- oracle

    def find_record(self, addr: int) -> AllocationRecord | None:
        """Live record whose reserved object span contains addr."""
        for rec in self.records:
            if rec.live and rec.sa <= addr <= rec.ea + rec.q:
                return rec
        return None

    def record_for_sa(self, sa: int) -> AllocationRecord | None:
        rec = self._by_sa.get(sa)
        return rec if rec is not None and rec.live else None

    def check_no_overlap(self) -> None:
        """Assert no two live reservations overlap; raises AssertionError."""
        spans = sorted(r.region for r in self.records if r.live)
        for (a_start, a_end), (b_start, b_end) in zip(spans, spans[1:]):
            assert a_end <= b_start, (
                f"overlapping reservations [{a_start:#x},{a_end:#x}) and "
                f"[{b_start:#x},{b_end:#x})")
