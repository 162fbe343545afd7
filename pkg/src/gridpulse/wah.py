"""Word-aligned hybrid (WAH) compressed bit vectors, 32-bit words.

Word layout:
  literal: MSB 0, bits 0..30 hold 31 logical bits (bit k of the word is
           logical bit k of the group).
  fill:    MSB 1, bit 30 is the fill value, bits 0..29 count how many
           31-bit groups the fill covers (>= 1).

Vectors are kept canonical: no literal word is all-zero or all-one (those
become fills) and no two adjacent fills share a value, so any two equal bit
sequences compress to identical words regardless of how they were built.
"""

from __future__ import annotations

from array import array

import numpy as np

WORD_BITS = 31
LITERAL_MASK = 0x7FFF_FFFF
FILL_FLAG = 0x8000_0000
FILL_ONE_FLAG = 0x4000_0000
MAX_FILL_COUNT = 0x3FFF_FFFF  # 2^30 - 1 groups per fill word


class WahLengthError(ValueError):
    """Logical operands must have equal bit lengths."""


def _fill_word(bit: int, count: int) -> int:
    return FILL_FLAG | (FILL_ONE_FLAG if bit else 0) | count


class WahVector:
    """An append-only compressed bit vector."""

    __slots__ = ("words", "active", "active_len", "length")

    def __init__(self):
        self.words = array("I")
        self.active = 0        # pending bits, < WORD_BITS of them
        self.active_len = 0
        self.length = 0        # logical bit length

    # ------------------------------------------------------------------ build

    def _push_group(self, group: int) -> None:
        """Emit one complete 31-bit group, canonicalizing fills."""
        words = self.words
        if group == 0 or group == LITERAL_MASK:
            bit = group != 0
            if words:
                last = words[-1]
                if last & FILL_FLAG and bool(last & FILL_ONE_FLAG) == bit \
                        and (last & MAX_FILL_COUNT) < MAX_FILL_COUNT:
                    words[-1] = last + 1
                    return
            words.append(_fill_word(bit, 1))
        else:
            words.append(group)

    def _push_fill(self, bit: int, count: int) -> None:
        """Emit ``count`` whole groups of a single bit value."""
        if count <= 0:
            return
        words = self.words
        if words:
            last = words[-1]
            if last & FILL_FLAG and bool(last & FILL_ONE_FLAG) == bool(bit):
                room = MAX_FILL_COUNT - (last & MAX_FILL_COUNT)
                take = min(room, count)
                words[-1] = last + take
                count -= take
        while count > 0:
            take = min(count, MAX_FILL_COUNT)
            words.append(_fill_word(bit, take))
            count -= take

    def append_run(self, bit: bool, count: int) -> None:
        """Append ``count`` copies of ``bit``."""
        if count < 0:
            raise ValueError("count must be >= 0")
        if count == 0:
            return
        self.length += count
        if self.active_len:
            take = min(WORD_BITS - self.active_len, count)
            if bit:
                self.active |= ((1 << take) - 1) << self.active_len
            self.active_len += take
            count -= take
            if self.active_len == WORD_BITS:
                self._push_group(self.active)
                self.active = 0
                self.active_len = 0
        if count == 0:
            return
        groups, rest = divmod(count, WORD_BITS)
        if groups:
            self._push_fill(1 if bit else 0, groups)
        if rest:
            self.active = (1 << rest) - 1 if bit else 0
            self.active_len = rest

    def append_bit(self, bit: bool) -> None:
        self.append_run(bit, 1)

    def append_groups(self, groups: np.ndarray) -> None:
        """Append whole 31-bit groups given as a uint32 array.

        Requires the vector to be group-aligned (no pending bits); used by
        the vectorized compressor.
        """
        if self.active_len:
            raise ValueError("vector not group-aligned")
        if groups.size == 0:
            return
        self.length += WORD_BITS * int(groups.size)
        fill0 = groups == 0
        fill1 = groups == LITERAL_MASK
        cls = np.zeros(groups.size, dtype=np.int8)
        cls[fill1] = 1
        cls[~(fill0 | fill1)] = 2
        # run boundaries over the fill0/fill1/literal classification
        starts = np.flatnonzero(np.r_[True, cls[1:] != cls[:-1]])
        ends = np.r_[starts[1:], cls.size]
        for s, e in zip(starts.tolist(), ends.tolist()):
            kind = cls[s]
            if kind == 2:
                self.words.extend(groups[s:e].tolist())
            else:
                self._push_fill(int(kind), e - s)

    # ------------------------------------------------------------- bulk codec

    @classmethod
    def compress(cls, bits: np.ndarray) -> "WahVector":
        """Compress a boolean (or 0/1) array."""
        bits = np.asarray(bits, dtype=bool)
        n = bits.size
        v = cls()
        whole = (n // WORD_BITS) * WORD_BITS
        if whole:
            v.append_groups(_pack_groups(bits[:whole]))
        for b in bits[whole:]:
            v.append_bit(bool(b))
        return v

    def decompress(self) -> np.ndarray:
        """Expand back to a boolean array of the logical length."""
        words = np.frombuffer(self.words, dtype=np.uint32) if self.words else \
            np.empty(0, dtype=np.uint32)
        is_fill = (words & FILL_FLAG) != 0
        counts = np.where(is_fill, words & MAX_FILL_COUNT, 1).astype(np.int64)
        values = np.where(is_fill,
                          np.where((words & FILL_ONE_FLAG) != 0, LITERAL_MASK, 0),
                          words & LITERAL_MASK).astype(np.uint32)
        groups = np.repeat(values, counts)
        out = np.empty(self.length, dtype=bool)
        whole = groups.size * WORD_BITS
        out[:whole] = _unpack_groups(groups)
        if self.active_len:
            pending = (self.active >> np.arange(self.active_len)) & 1
            out[whole:] = pending.astype(bool)
        return out

    # ---------------------------------------------------------------- queries

    def count(self) -> int:
        """Number of set bits."""
        total = 0
        for w in self.words:
            if w & FILL_FLAG:
                if w & FILL_ONE_FLAG:
                    total += WORD_BITS * (w & MAX_FILL_COUNT)
            else:
                total += bin(w).count("1")
        return total + bin(self.active).count("1")

    def iter_set_runs(self):
        """Yield (start, stop) half-open position runs of consecutive ones.

        Zero fills are skipped in O(1) per word, so sparse vectors iterate
        in time proportional to their compressed size plus their hit count.
        """
        pos = 0
        run_start = -1
        for w in self.words:
            if w & FILL_FLAG:
                n = WORD_BITS * (w & MAX_FILL_COUNT)
                if w & FILL_ONE_FLAG:
                    if run_start < 0:
                        run_start = pos
                else:
                    if run_start >= 0:
                        yield run_start, pos
                        run_start = -1
                pos += n
            else:
                bits = w
                k = 0
                while bits:
                    if bits & 1:
                        if run_start < 0:
                            run_start = pos + k
                    else:
                        if run_start >= 0:
                            yield run_start, pos + k
                            run_start = -1
                    bits >>= 1
                    k += 1
                if run_start >= 0 and k < WORD_BITS:
                    # remaining high bits of the literal are zero
                    yield run_start, pos + k
                    run_start = -1
                pos += WORD_BITS
        if self.active_len:
            bits = self.active
            for k in range(self.active_len):
                if bits & 1:
                    if run_start < 0:
                        run_start = pos + k
                else:
                    if run_start >= 0:
                        yield run_start, pos + k
                        run_start = -1
                bits >>= 1
            pos += self.active_len
        if run_start >= 0:
            yield run_start, pos

    def word_count(self) -> int:
        return len(self.words) + (1 if self.active_len else 0)

    def byte_size(self) -> int:
        """Approximate in-memory payload size of the compressed form."""
        return 4 * len(self.words) + (4 if self.active_len else 0)

    # ------------------------------------------------------------------ dunder

    def __len__(self) -> int:
        return self.length

    def __eq__(self, other) -> bool:
        if not isinstance(other, WahVector):
            return NotImplemented
        return (self.length == other.length and self.active_len == other.active_len
                and self.active == other.active and self.words == other.words)

    def __repr__(self) -> str:
        return f"WahVector(length={self.length}, words={len(self.words)})"


def _pack_groups(bits: np.ndarray) -> np.ndarray:
    """Pack a bool array (length divisible by 31) into 31-bit uint32 groups."""
    g = bits.reshape(-1, WORD_BITS)
    padded = np.concatenate([g, np.zeros((g.shape[0], 1), dtype=bool)], axis=1)
    packed = np.packbits(padded, axis=1, bitorder="little")
    return packed.view(np.uint32).ravel()


def _unpack_groups(groups: np.ndarray) -> np.ndarray:
    """Inverse of _pack_groups."""
    if groups.size == 0:
        return np.empty(0, dtype=bool)
    as_bytes = groups.astype("<u4").view(np.uint8).reshape(-1, 4)
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little")
    return bits[:, :WORD_BITS].ravel().astype(bool)


class _Cursor:
    """Decodes one operand of a logical op into group-aligned runs."""

    __slots__ = ("words", "idx", "is_fill", "fill_bit", "remaining", "literal")

    def __init__(self, words):
        self.words = words
        self.idx = 0
        self.remaining = 0
        self.is_fill = False
        self.fill_bit = 0
        self.literal = 0

    def load(self) -> bool:
        if self.idx >= len(self.words):
            return False
        w = self.words[self.idx]
        self.idx += 1
        if w & FILL_FLAG:
            self.is_fill = True
            self.fill_bit = 1 if w & FILL_ONE_FLAG else 0
            self.remaining = w & MAX_FILL_COUNT
        else:
            self.is_fill = False
            self.literal = w
            self.remaining = 1
        return True


def _combine(a: WahVector, b: WahVector, op_and: bool) -> WahVector:
    if a.length != b.length:
        raise WahLengthError(
            f"operand lengths differ: {a.length} != {b.length}")
    out = WahVector()
    ca, cb = _Cursor(a.words), _Cursor(b.words)
    have_a = ca.load()
    have_b = cb.load()
    while have_a and have_b:
        if ca.is_fill and cb.is_fill:
            take = min(ca.remaining, cb.remaining)
            bit = (ca.fill_bit & cb.fill_bit) if op_and else (ca.fill_bit | cb.fill_bit)
            out._push_fill(bit, take)
            ca.remaining -= take
            cb.remaining -= take
        elif ca.is_fill:
            # fill meets literal: consume one group
            if op_and:
                out._push_group(cb.literal if ca.fill_bit else 0)
            else:
                out._push_group(LITERAL_MASK if ca.fill_bit else cb.literal)
            ca.remaining -= 1
            cb.remaining -= 1
        elif cb.is_fill:
            if op_and:
                out._push_group(ca.literal if cb.fill_bit else 0)
            else:
                out._push_group(LITERAL_MASK if cb.fill_bit else ca.literal)
            ca.remaining -= 1
            cb.remaining -= 1
        else:
            g = (ca.literal & cb.literal) if op_and else (ca.literal | cb.literal)
            out._push_group(g)
            ca.remaining -= 1
            cb.remaining -= 1
        if ca.remaining == 0:
            have_a = ca.load()
        if cb.remaining == 0:
            have_b = cb.load()
    out.length = (a.length // WORD_BITS) * WORD_BITS
    if a.active_len:
        mask = (1 << a.active_len) - 1
        out.active = (a.active & b.active) if op_and else (a.active | b.active)
        out.active &= mask
        out.active_len = a.active_len
        out.length += a.active_len
    return out


def wah_and(a: WahVector, b: WahVector) -> WahVector:
    """Bitwise AND over the compressed form."""
    return _combine(a, b, op_and=True)


def wah_or(a: WahVector, b: WahVector) -> WahVector:
    """Bitwise OR over the compressed form."""
    return _combine(a, b, op_and=False)
