"""
Batched encrypted linear algebra on top of the CKKS evaluator.

Vectors carry their slot layout (encoding, repeat factor, footprint) together with the
bookkeeping needed to rotate them safely: the number of leading zero slots and the length
of the tail that may hold rotated-out junk.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from ..utils.errors import DimensionError, EncodingError, FootprintError
from .ckks import Ciphertext, CKKSContext, Evaluator

logger = logging.getLogger(__name__)


class Encoding(str, Enum):
    V0 = "v0"
    VSTAR = "v*"
    VV = "vv"
    VR0 = "vr0"
    VRSTAR = "vr*"


# Multiplicative levels consumed per operation.
LEVEL_COST = {
    "matvec": 1,
    "inner_vv": 1,
    "inner_vvr": 1,
    "weigh": 1,
    "mask": 1,
    "eval_sum": 0,
    "pack": 0,
    "unpack": 1,
}


@dataclass(frozen=True)
class PlainVec:
    slots: np.ndarray
    encoding: Encoding
    logical_len: int
    repeat: int = 1
    footprint: int = 0


@dataclass(frozen=True)
class EncVec:
    """
    An encrypted vector with layout metadata.

    valid is a slot bitmap for the STAR encodings (None means the layout is exact and every
    slot outside the footprint is zero up to the junk tail).
    """

    ct: Ciphertext
    encoding: Encoding
    logical_len: int
    slots: int
    repeat: int = 1
    footprint: int = 0
    junk_tail: int = 0
    lead_zeros: int = 0
    valid: np.ndarray | None = None

    @property
    def rotation_budget(self) -> int:
        """Left shifts still possible before junk reaches the footprint."""
        return self.slots - self.footprint - self.junk_tail

    @property
    def level(self) -> int:
        return self.ct.level

    @property
    def depth(self) -> int:
        """Ledger depth: moduli consumed since encryption plus one."""
        return self.ct.level + 1


def make_encoding(x, encoding: Encoding, repeat: int = 1, n_slots: int = 0) -> PlainVec:
    """Slot layout of x for one of the five encodings."""
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    if encoding is Encoding.VV:
        if n == 0 or n > n_slots:
            raise FootprintError(f"cannot tile {n} values into {n_slots} slots")
        return PlainVec(np.resize(x, n_slots), encoding, n, 1, n_slots)
    if encoding in (Encoding.VR0, Encoding.VRSTAR):
        data = np.repeat(x, repeat)
    else:
        data = x
        repeat = 1
    if data.size > n_slots:
        raise FootprintError(f"footprint {data.size} exceeds {n_slots} slots")
    slots = np.zeros(n_slots)
    slots[: data.size] = data
    return PlainVec(slots, encoding, n, repeat, data.size)


def encrypt_vec(ctx: CKKSContext, pk, pv: PlainVec, rng: np.random.Generator) -> EncVec:
    ct = ctx.encrypt(pk, ctx.encode(pv.slots), rng)
    encoding = {Encoding.VSTAR: Encoding.V0, Encoding.VRSTAR: Encoding.VR0}.get(pv.encoding, pv.encoding)
    return EncVec(ct, encoding, pv.logical_len, ctx.slots, pv.repeat, pv.footprint)


def decrypt_vec(ctx: CKKSContext, sk, vec: EncVec) -> np.ndarray:
    """Logical values of an encrypted vector (first slot of each block for repeated layouts)."""
    slots = ctx.decrypt_decode(sk, vec.ct)
    if vec.encoding in (Encoding.VR0, Encoding.VRSTAR):
        return slots[: vec.logical_len * vec.repeat : vec.repeat]
    return slots[: vec.logical_len]


def _require_clean(vec: EncVec, what: str):
    if vec.encoding in (Encoding.VSTAR, Encoding.VRSTAR):
        raise EncodingError(f"{what} needs a junk-free operand, got {vec.encoding.value}")


def _require_valid(vec: EncVec, needed: np.ndarray):
    if vec.valid is not None and not vec.valid[needed].all():
        raise EncodingError("operation reads slots that hold junk")


def _bitmap(n_slots: int, stop: int, start: int = 0) -> np.ndarray:
    bits = np.zeros(n_slots, dtype=bool)
    bits[start:stop] = True
    return bits


# --- rotations with layout tracking ----------------------------------------------


def shift_left(ev: Evaluator, vec: EncVec, k: int) -> EncVec:
    """Rotate left by k, charging wrapped non-zero slots to the junk tail."""
    if k == 0:
        return vec
    if vec.junk_tail:
        junk = vec.junk_tail + k
    else:
        junk = max(0, k - vec.lead_zeros)
    if vec.footprint + junk > vec.slots:
        raise FootprintError(f"rotation budget exhausted: footprint {vec.footprint} + junk {junk} > {vec.slots} slots")
    return replace(vec, ct=ev.rot(vec.ct, k), junk_tail=junk, lead_zeros=max(0, vec.lead_zeros - k))


def place(ev: Evaluator, vec: EncVec, k: int) -> EncVec:
    """Rotate a junk-free vector right by k."""
    if k == 0:
        return vec
    if vec.junk_tail or vec.valid is not None:
        raise FootprintError("right rotation of a vector that carries junk")
    if vec.footprint + k > vec.slots:
        raise FootprintError(f"placing at offset {k} overflows {vec.slots} slots")
    return replace(vec, ct=ev.rot(vec.ct, -k), footprint=vec.footprint + k, lead_zeros=vec.lead_zeros + k)


def add_vec(ev: Evaluator, a: EncVec, b: EncVec) -> EncVec:
    if a.repeat != b.repeat:
        raise EncodingError(f"repeat mismatch: {a.repeat} vs {b.repeat}")
    return replace(
        a,
        ct=ev.add(a.ct, b.ct),
        footprint=max(a.footprint, b.footprint),
        junk_tail=max(a.junk_tail, b.junk_tail),
        lead_zeros=min(a.lead_zeros, b.lead_zeros),
        logical_len=max(a.logical_len, b.logical_len),
    )


# --- summations ------------------------------------------------------------------


def rotate_sum_indices(count: int, step: int) -> set[int]:
    """Rotation indices used by rotate_sum(count, step)."""
    indices: set[int] = set()
    offset, k = 0, 0
    while count:
        if count & 1:
            if offset:
                indices.add(offset * step)
            offset += 1 << k
        count >>= 1
        if count:
            indices.add((1 << k) * step)
            k += 1
    return indices


def rotate_sum(ev: Evaluator, ct: Ciphertext, count: int, step: int) -> Ciphertext:
    """
    Sum of rho(ct, d * step) for d < count.

    Power-of-two doubling with a remainder pass: every set bit of count adds the current
    doubled partial sum at the running offset.
    """
    if count < 1:
        raise DimensionError("rotate_sum needs a positive count")
    result = None
    acc = ct
    offset, k = 0, 0
    while count:
        if count & 1:
            term = ev.rot(acc, offset * step) if offset else acc
            result = term if result is None else ev.add(result, term)
            offset += 1 << k
        count >>= 1
        if count:
            acc = ev.add(acc, ev.rot(acc, (1 << k) * step))
            k += 1
    return result


def eval_sum_batch(ev: Evaluator, ct: Ciphertext, batch: int, footprint: int | None = None) -> Ciphertext:
    """Slot j*batch holds the sum of batch j; other slots hold partial sums."""
    footprint = ev.slots if footprint is None else footprint
    if batch > footprint:
        raise FootprintError(f"batch {batch} larger than footprint {footprint}")
    if footprint % batch:
        raise FootprintError(f"batch {batch} does not divide footprint {footprint}")
    if batch == 1:
        return ct
    return rotate_sum(ev, ct, batch, 1)


def eval_sum_blocks(ev: Evaluator, ct: Ciphertext, block: int, count: int) -> Ciphertext:
    """Sum of count consecutive blocks of width block, landing in block 0."""
    if block * count > ev.slots:
        raise FootprintError(f"{count} blocks of {block} slots exceed {ev.slots} slots")
    if count == 1:
        return ct
    return rotate_sum(ev, ct, count, block)


def replicate_sum(ev: Evaluator, ct: Ciphertext) -> Ciphertext:
    """Total over all slots, replicated in every slot."""
    return rotate_sum(ev, ct, ev.slots, 1)


def mask(ev: Evaluator, ct: Ciphertext, keep, values=None) -> Ciphertext:
    """Multiply kept slots by values (default 1) and zero the rest; one level."""
    vec = np.zeros(ev.slots)
    keep = np.asarray(keep, dtype=np.int64)
    vec[keep] = 1.0 if values is None else np.asarray(values, dtype=np.float64)
    return ev.mul_plain(ct, vec)


# --- matrix-vector products --------------------------------------------------------


def padded_rows(rows: int, cols: int) -> int:
    """Smallest row count >= rows that divides cols."""
    for r in range(rows, cols + 1):
        if cols % r == 0:
            return r
    raise DimensionError(f"no row padding of {rows} divides {cols}")


def diagonals(matrix: np.ndarray, mode: str = "tall") -> list[np.ndarray]:
    """
    Generalized diagonals of a u x v matrix.

    tall/reduced: v vectors of length u with d_i[k] = A[k, (k + i) mod v].
    extended: rows are zero-padded to u' dividing v, then u' vectors of length v with
    d_i[k] = A[k mod u', (k + i) mod v].
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    u, v = matrix.shape
    if mode in ("tall", "reduced"):
        k = np.arange(u)
        return [matrix[k, (k + i) % v] for i in range(v)]
    if mode == "extended":
        rows = padded_rows(u, v)
        padded = np.zeros((rows, v))
        padded[:u] = matrix
        k = np.arange(v)
        return [padded[k % rows, (k + i) % v] for i in range(rows)]
    raise ValueError(f"unknown diagonal mode: {mode}")


def matvec_indices(shape: tuple[int, int], mode: str) -> set[int]:
    u, v = shape
    if mode in ("tall", "reduced"):
        return set(range(1, v))
    rows = padded_rows(u, v)
    return set(range(1, rows)) | rotate_sum_indices(v // rows, rows)


def _diag_product(ev: Evaluator, diag_cts: list[Ciphertext], p_vv: EncVec) -> Ciphertext:
    if p_vv.encoding is not Encoding.VV:
        raise EncodingError(f"matrix-vector products take a tiled operand, got {p_vv.encoding.value}")
    rotations = ev.rot_many(p_vv.ct, range(len(diag_cts)))
    return ev.dot([(d, rotations[i]) for i, d in enumerate(diag_cts)])


def matvec_tall_diag(ev: Evaluator, diag_cts: list[Ciphertext], p_vv: EncVec, rows: int) -> EncVec:
    """S p for a tall u x v matrix given by its v extended diagonals."""
    if len(diag_cts) != p_vv.logical_len:
        raise DimensionError(f"{len(diag_cts)} diagonals for a vector of length {p_vv.logical_len}")
    if rows < len(diag_cts):
        raise DimensionError("tall product needs rows >= columns")
    ct = _diag_product(ev, diag_cts, p_vv)
    return EncVec(ct, Encoding.V0, rows, ev.slots, footprint=rows)


def matvec_wide_diag(ev: Evaluator, diag_cts: list[Ciphertext], p_vv: EncVec, shape: tuple[int, int], mode: str = "extended") -> EncVec:
    """
    S p for a wide u x v matrix.

    reduced: v diagonals of length u, junk-free result.
    extended: u' diagonals of length v folded down to u slots; the result carries junk.
    """
    u, v = shape
    if p_vv.logical_len != v:
        raise DimensionError(f"vector of length {p_vv.logical_len} for {v} columns")
    if mode == "reduced":
        if len(diag_cts) != v:
            raise DimensionError(f"reduced mode expects {v} diagonals")
        return EncVec(_diag_product(ev, diag_cts, p_vv), Encoding.V0, u, ev.slots, footprint=u)
    if mode != "extended":
        raise ValueError(f"unknown mode: {mode}")
    rows = padded_rows(u, v)
    if len(diag_cts) != rows:
        raise DimensionError(f"extended mode expects {rows} diagonals, got {len(diag_cts)}")
    z = _diag_product(ev, diag_cts, p_vv)
    folded = rotate_sum(ev, z, v // rows, rows) if v > rows else z
    return EncVec(folded, Encoding.VSTAR, u, ev.slots, footprint=u, valid=_bitmap(ev.slots, u))


# --- inner products --------------------------------------------------------------------


def inner_vv(ev: Evaluator, a: EncVec, b: EncVec) -> EncVec:
    """a^T b in slot 0."""
    if a.logical_len != b.logical_len:
        raise DimensionError(f"length mismatch: {a.logical_len} vs {b.logical_len}")
    if a.encoding is not Encoding.V0 and b.encoding is not Encoding.V0:
        raise EncodingError("at least one operand must be zero-padded")
    prod = ev.mul(a.ct, b.ct)
    width = 1 << max(0, (a.logical_len - 1).bit_length())
    total = rotate_sum(ev, prod, width, 1) if width > 1 else prod
    return EncVec(total, Encoding.VSTAR, 1, ev.slots, footprint=1, valid=_bitmap(ev.slots, 1))


def weigh(ev: Evaluator, vec: EncVec, weights: PlainVec) -> EncVec:
    """Slotwise product with plaintext weights of the same layout."""
    if weights.encoding is not vec.encoding or weights.repeat != vec.repeat:
        raise EncodingError("weights use a different layout")
    return replace(vec, ct=ev.mul_plain(vec.ct, weights.slots))


def inner_vvr(ev: Evaluator, a: EncVec, b: EncVec, weights: PlainVec | None = None) -> EncVec:
    """
    a^T diag(w) b replicated across the first repeat block.

    Weights add the level of weigh on top of the inner product.
    """
    for vec in (a, b):
        if vec.encoding is not Encoding.VR0:
            raise EncodingError(f"repeated inner product takes vr0 operands, got {vec.encoding.value}")
    if a.repeat != b.repeat:
        raise EncodingError(f"repeat mismatch: {a.repeat} vs {b.repeat}")
    if a.logical_len != b.logical_len:
        raise DimensionError(f"length mismatch: {a.logical_len} vs {b.logical_len}")
    if weights is not None:
        a = weigh(ev, a, weights)
    return weighted_inner_sum(ev, [(a.ct, b.ct)], a.repeat, a.logical_len)


def weighted_inner_sum(ev: Evaluator, pairs: list[tuple[Ciphertext, Ciphertext]], repeat: int, blocks: int) -> EncVec:
    """Sum of slotwise products of vr0 operands reduced over blocks, replicated in [0, repeat)."""
    total = eval_sum_blocks(ev, ev.dot(pairs), repeat, blocks)
    return EncVec(total, Encoding.VRSTAR, 1, ev.slots, repeat=repeat, footprint=repeat, valid=_bitmap(ev.slots, repeat))


# --- matrix packing ---------------------------------------------------------------------


def columns_per_ciphertext(width: int, n_slots: int) -> int:
    if width > n_slots:
        raise FootprintError(f"column of {width} slots does not fit {n_slots} slots")
    return n_slots // width


def pack_indices(width: int, n_slots: int, count: int) -> set[int]:
    per = min(columns_per_ciphertext(width, n_slots), count)
    return {j * width for j in range(1, per)} | {-j * width for j in range(1, per)}


def pack_columns(ev: Evaluator, cols: list[EncVec]) -> list[Ciphertext]:
    """Columns of a square matrix side by side: column i at slots [iW, (i+1)W) of its ciphertext."""
    width = len(cols)
    per = columns_per_ciphertext(width, ev.slots)
    packed = []
    for start in range(0, width, per):
        acc = None
        for j, col in enumerate(cols[start : start + per]):
            _require_clean(col, "packing")
            if col.footprint > width:
                raise FootprintError(f"column footprint {col.footprint} exceeds width {width}")
            term = ev.rot(col.ct, -j * width) if j else col.ct
            acc = term if acc is None else ev.add(acc, term)
        packed.append(acc)
    logger.debug("packed %d columns into %d ciphertexts", width, len(packed))
    return packed


def unpack_columns(ev: Evaluator, packed: list[Ciphertext], width: int) -> list[EncVec]:
    """Inverse of pack_columns; one level for the masks."""
    per = columns_per_ciphertext(width, ev.slots)
    if len(packed) != -(-width // per):
        raise DimensionError(f"{len(packed)} packed ciphertexts for {width} columns")
    keep = np.arange(width)
    cols = []
    for c, ct in enumerate(packed):
        count = min(per, width - c * per)
        rotated = ev.rot_many(ct, [j * width for j in range(count)])
        for j in range(count):
            cols.append(EncVec(mask(ev, rotated[j * width], keep), Encoding.V0, width, ev.slots, footprint=width))
    return cols
