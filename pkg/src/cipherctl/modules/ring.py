"""
Polynomial ring arithmetic over Z_Q[X]/(X^N + 1) in RNS form.

Elements are stored as int64 limb arrays of shape (L, N), one row per modulus of the
active chain prefix. Every modulus stays below 2^61 so that the wrapping int64 products
used by the float-quotient reduction never leave the representable range.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..utils.errors import RingError

logger = logging.getLogger(__name__)

# Quotients below 2^52 are recovered exactly (up to +-1) from float64 arithmetic.
_FAST_LIMIT = 1 << 52
_MAX_MODULUS = 1 << 61
_SPLIT_BITS = 30
_SPLIT_MASK = (1 << _SPLIT_BITS) - 1

MR_WITNESSES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)

DEFAULT_SIGMA = 3.2
TAIL_CUT = 6.0


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin for n < 3.3e24 (first twelve primes as witnesses)."""
    if n < 2:
        return False
    for p in MR_WITNESSES:
        if n % p == 0:
            return n == p
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in MR_WITNESSES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def find_primes(bits: int, count: int, ring_dim: int, exclude: tuple[int, ...] = ()) -> list[int]:
    """
    Largest primes below 2^bits that are congruent to 1 mod 2*ring_dim.

    Args:
        bits: Bit length of every returned prime
        count: Number of primes to return
        ring_dim: Ring dimension N (power of two)
        exclude: Primes that must be skipped

    Returns:
        Primes in descending order
    """
    step = 2 * ring_dim
    candidate = ((1 << bits) - 1) // step * step + 1
    lower = 1 << (bits - 1)
    primes: list[int] = []
    while len(primes) < count:
        if candidate <= lower:
            raise RingError(f"only {len(primes)} of {count} {bits}-bit primes = 1 mod {step} exist")
        if candidate not in exclude and is_prime(candidate):
            primes.append(candidate)
        candidate -= step
    return primes


@dataclass(frozen=True)
class RingParams:
    """Ring dimension, ciphertext moduli chain and key-switching prime."""

    ring_dim: int
    moduli: tuple[int, ...]
    special: int
    first_mod_bits: int
    scale_bits: int

    @property
    def slots(self) -> int:
        return self.ring_dim // 2

    @property
    def total_bits(self) -> int:
        """Sum of the bit lengths of the chain moduli."""
        return sum(q.bit_length() for q in self.moduli)

    @property
    def modulus_bits(self) -> int:
        """Bit length of the full ciphertext modulus Q_L."""
        product = 1
        for q in self.moduli:
            product *= q
        return product.bit_length()

    def to_dict(self) -> dict:
        return {
            "ring_dim": self.ring_dim,
            "moduli": [str(q) for q in self.moduli],
            "special": str(self.special),
            "first_mod_bits": self.first_mod_bits,
            "scale_bits": self.scale_bits,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RingParams":
        return cls(
            ring_dim=int(data["ring_dim"]),
            moduli=tuple(int(q) for q in data["moduli"]),
            special=int(data["special"]),
            first_mod_bits=int(data["first_mod_bits"]),
            scale_bits=int(data["scale_bits"]),
        )


def gen_params(ring_dim: int, level_count: int, first_mod_bits: int = 60, scale_bits: int = 50) -> RingParams:
    """
    Deterministic NTT-friendly moduli chain.

    Args:
        ring_dim: Power-of-two ring dimension, at least 8
        level_count: Number of chain moduli (first modulus included)
        first_mod_bits: Bit size of q_0 and of the key-switching prime
        scale_bits: Bit size of the remaining (rescaling) moduli

    Returns:
        RingParams with moduli (q_0, q_1, ..., q_{L-1}) and a distinct special prime
    """
    if ring_dim < 8 or ring_dim & (ring_dim - 1):
        raise RingError(f"ring dimension must be a power of two >= 8, got {ring_dim}")
    if level_count < 1:
        raise RingError("at least one modulus is required")
    if max(first_mod_bits, scale_bits) > _MAX_MODULUS.bit_length() - 1:
        raise RingError("moduli must stay below 2^61")
    if first_mod_bits == scale_bits:
        primes = find_primes(first_mod_bits, level_count + 1, ring_dim)
        chain, special = tuple(primes[:level_count]), primes[level_count]
    else:
        first, special = find_primes(first_mod_bits, 2, ring_dim)
        rest = find_primes(scale_bits, level_count - 1, ring_dim) if level_count > 1 else []
        chain = (first, *rest)
    logger.debug("generated %d moduli for N=%d (%d bits)", len(chain), ring_dim, sum(q.bit_length() for q in chain))
    return RingParams(ring_dim, chain, special, first_mod_bits, scale_bits)


class ModulusBasis:
    """Stacked moduli with the row split between fast and split multiplication."""

    def __init__(self, moduli: tuple[int, ...]):
        if any(q >= _MAX_MODULUS for q in moduli):
            raise RingError("moduli must stay below 2^61")
        self.moduli = tuple(moduli)
        self.q = np.array(moduli, dtype=np.int64)
        small = self.q < _FAST_LIMIT
        self.small_rows = np.flatnonzero(small)
        self.big_rows = np.flatnonzero(~small)

    def col(self, ndim: int) -> np.ndarray:
        """Moduli shaped to broadcast along axis 0 of an ndim array."""
        return self.q.reshape((-1,) + (1,) * (ndim - 1))

    def __len__(self) -> int:
        return len(self.moduli)


@lru_cache(maxsize=None)
def basis(moduli: tuple[int, ...]) -> ModulusBasis:
    return ModulusBasis(moduli)


def add_mod(a: np.ndarray, b: np.ndarray, q: np.ndarray) -> np.ndarray:
    s = a + b
    return np.where(s >= q, s - q, s)


def sub_mod(a: np.ndarray, b: np.ndarray, q: np.ndarray) -> np.ndarray:
    s = a - b
    return np.where(s < 0, s + q, s)


def _mul_fast(a: np.ndarray, b: np.ndarray, q: np.ndarray) -> np.ndarray:
    qt = np.floor(a.astype(np.float64) * b.astype(np.float64) / q.astype(np.float64)).astype(np.int64)
    r = a * b - qt * q
    r = np.where(r < 0, r + q, r)
    r = np.where(r < 0, r + q, r)
    r = np.where(r >= q, r - q, r)
    return np.where(r >= q, r - q, r)


def _mul_split(a: np.ndarray, b: np.ndarray, q: np.ndarray) -> np.ndarray:
    hi = _mul_fast(a, b >> _SPLIT_BITS, q)
    hi = _mul_fast(hi, np.full_like(hi, 1 << _SPLIT_BITS), q)
    return add_mod(hi, _mul_fast(a, b & _SPLIT_MASK, q), q)


def _rows(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return x if x.shape[0] == 1 else x[idx]


def mul_mod(a: np.ndarray, b: np.ndarray, mods: ModulusBasis) -> np.ndarray:
    """Elementwise a*b mod q with the modulus indexed by axis 0."""
    ndim = max(a.ndim, b.ndim)
    a = a.reshape(a.shape + (1,) * (ndim - a.ndim)) if a.ndim < ndim else a
    b = b.reshape(b.shape + (1,) * (ndim - b.ndim)) if b.ndim < ndim else b
    q = mods.col(ndim)
    if not mods.big_rows.size:
        return _mul_fast(a, b, q)
    if not mods.small_rows.size:
        return _mul_split(a, b, q)
    shape = np.broadcast_shapes(a.shape, b.shape)
    out = np.empty((len(mods),) + shape[1:], dtype=np.int64)
    out[mods.small_rows] = _mul_fast(_rows(a, mods.small_rows), _rows(b, mods.small_rows), q[mods.small_rows])
    out[mods.big_rows] = _mul_split(_rows(a, mods.big_rows), _rows(b, mods.big_rows), q[mods.big_rows])
    return out


def _primitive_root_2n(q: int, ring_dim: int) -> int:
    exponent = (q - 1) // (2 * ring_dim)
    for x in range(2, q):
        psi = pow(x, exponent, q)
        if pow(psi, ring_dim, q) == q - 1:
            return psi
    raise RingError(f"no primitive {2 * ring_dim}-th root of unity mod {q}")


def _powers(base: int, count: int, q: int, scale: int = 1) -> np.ndarray:
    out = np.empty(count, dtype=np.int64)
    acc = scale % q
    for k in range(count):
        out[k] = acc
        acc = acc * base % q
    return out


@lru_cache(maxsize=None)
def _modulus_tables(ring_dim: int, q: int) -> tuple[np.ndarray, ...]:
    psi = _primitive_root_2n(q, ring_dim)
    psi_inv = pow(psi, -1, q)
    n_inv = pow(ring_dim, -1, q)
    omega = psi * psi % q
    omega_inv = pow(omega, -1, q)
    half = ring_dim // 2
    return (
        _powers(psi, ring_dim, q),
        _powers(psi_inv, ring_dim, q, scale=n_inv),
        _powers(omega, half, q),
        _powers(omega_inv, half, q),
    )


@lru_cache(maxsize=None)
def _bit_reverse(ring_dim: int) -> np.ndarray:
    bits = ring_dim.bit_length() - 1
    idx = np.arange(ring_dim)
    rev = np.zeros(ring_dim, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


class NTTTables:
    """Twiddle tables for a stacked moduli basis."""

    def __init__(self, ring_dim: int, moduli: tuple[int, ...]):
        per_mod = [_modulus_tables(ring_dim, q) for q in moduli]
        self.ring_dim = ring_dim
        self.basis = basis(moduli)
        self.psi = np.stack([t[0] for t in per_mod])
        self.psi_inv_scaled = np.stack([t[1] for t in per_mod])
        self.omega = np.stack([t[2] for t in per_mod])
        self.omega_inv = np.stack([t[3] for t in per_mod])
        self.bitrev = _bit_reverse(ring_dim)


@lru_cache(maxsize=256)
def ntt_tables(ring_dim: int, moduli: tuple[int, ...]) -> NTTTables:
    return NTTTables(ring_dim, moduli)


def ntt_array(x: np.ndarray, ring_dim: int, moduli: tuple[int, ...], inverse: bool = False) -> np.ndarray:
    """
    Negacyclic NTT on a (L, N) or (L, B, N) array, modulus per row.

    Forward output index i holds the evaluation at psi^(2i+1); the inverse maps back
    to coefficients exactly.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, None, :]
    tables = ntt_tables(ring_dim, moduli)
    mods = tables.basis
    limbs, batch, n = x.shape
    if not inverse:
        x = mul_mod(x, tables.psi[:, None, :], mods)
    x = x[:, :, tables.bitrev]
    omega = tables.omega_inv if inverse else tables.omega
    q5 = mods.col(5)
    m = 1
    while m < n:
        blocks = x.reshape(limbs, batch, n // (2 * m), 2, m)
        twiddle = omega[:, :: n // (2 * m)][:, :m].reshape(limbs, 1, 1, m)
        even = blocks[:, :, :, 0, :]
        odd = mul_mod(blocks[:, :, :, 1, :], twiddle, mods)
        x = np.stack((add_mod(even, odd, q5[..., 0]), sub_mod(even, odd, q5[..., 0])), axis=3).reshape(limbs, batch, n)
        m *= 2
    if inverse:
        x = mul_mod(x, tables.psi_inv_scaled[:, None, :], mods)
    return x[:, 0, :] if squeeze else x


@lru_cache(maxsize=None)
def galois_permutation(ring_dim: int, g: int) -> np.ndarray:
    """Evaluation-domain permutation for X -> X^g: new[i] = old[perm[i]]."""
    two_n = 2 * ring_dim
    i = np.arange(ring_dim, dtype=np.int64)
    target = (g * (2 * i + 1)) % two_n
    return (target - 1) // 2


@dataclass(frozen=True)
class RingElem:
    """RNS element: one int64 row per active modulus, coefficient or evaluation form."""

    limbs: np.ndarray
    moduli: tuple[int, ...]
    is_ntt: bool

    def __post_init__(self):
        if self.limbs.shape[0] != len(self.moduli):
            raise RingError(f"{self.limbs.shape[0]} limbs for {len(self.moduli)} moduli")

    @property
    def ring_dim(self) -> int:
        return self.limbs.shape[1]

    @property
    def active(self) -> int:
        return len(self.moduli)

    def __add__(self, other: "RingElem") -> "RingElem":
        return poly_add(self, other)

    def __sub__(self, other: "RingElem") -> "RingElem":
        return poly_sub(self, other)

    def __neg__(self) -> "RingElem":
        return poly_neg(self)

    def __mul__(self, other: "RingElem") -> "RingElem":
        return poly_mul(self, other)


def _check_pair(a: RingElem, b: RingElem):
    if a.moduli != b.moduli:
        raise RingError(f"moduli mismatch: {a.active} vs {b.active} active moduli")
    if a.is_ntt != b.is_ntt:
        raise RingError("representation mismatch between operands")


def ntt_forward(elem: RingElem) -> RingElem:
    if elem.is_ntt:
        raise RingError("element is already in evaluation form")
    return RingElem(ntt_array(elem.limbs, elem.ring_dim, elem.moduli), elem.moduli, True)


def ntt_inverse(elem: RingElem) -> RingElem:
    if not elem.is_ntt:
        raise RingError("element is already in coefficient form")
    return RingElem(ntt_array(elem.limbs, elem.ring_dim, elem.moduli, inverse=True), elem.moduli, False)


def poly_add(a: RingElem, b: RingElem) -> RingElem:
    _check_pair(a, b)
    return RingElem(add_mod(a.limbs, b.limbs, basis(a.moduli).col(2)), a.moduli, a.is_ntt)


def poly_sub(a: RingElem, b: RingElem) -> RingElem:
    _check_pair(a, b)
    return RingElem(sub_mod(a.limbs, b.limbs, basis(a.moduli).col(2)), a.moduli, a.is_ntt)


def poly_neg(a: RingElem) -> RingElem:
    q = basis(a.moduli).col(2)
    return RingElem(np.where(a.limbs == 0, 0, q - a.limbs), a.moduli, a.is_ntt)


def poly_mul(a: RingElem, b: RingElem) -> RingElem:
    """Negacyclic product; coefficient-form operands round-trip through the NTT."""
    _check_pair(a, b)
    if a.is_ntt:
        return RingElem(mul_mod(a.limbs, b.limbs, basis(a.moduli)), a.moduli, True)
    prod = mul_mod(ntt_forward(a).limbs, ntt_forward(b).limbs, basis(a.moduli))
    return ntt_inverse(RingElem(prod, a.moduli, True))


def mul_const(a: RingElem, consts: list[int] | tuple[int, ...]) -> RingElem:
    """Multiply limb i by consts[i] mod q_i."""
    c = np.array([int(k) % q for k, q in zip(consts, a.moduli)], dtype=np.int64).reshape(-1, 1)
    return RingElem(mul_mod(a.limbs, c, basis(a.moduli)), a.moduli, a.is_ntt)


def from_integers(coeffs: np.ndarray, moduli: tuple[int, ...], to_ntt: bool = False) -> RingElem:
    """Reduce signed integer coefficients (int64 or Python-int objects) into RNS limbs."""
    if coeffs.dtype == object:
        limbs = np.stack([np.array([int(c) % q for c in coeffs], dtype=np.int64) for q in moduli])
    else:
        limbs = np.mod(coeffs.astype(np.int64)[None, :], basis(moduli).col(2))
    elem = RingElem(limbs, tuple(moduli), False)
    return ntt_forward(elem) if to_ntt else elem


def centered(limbs: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.where(limbs > q // 2, limbs - q, limbs)


def to_integers(elem: RingElem) -> np.ndarray:
    """Centered CRT reconstruction of every coefficient as Python integers."""
    coeff = ntt_inverse(elem) if elem.is_ntt else elem
    if coeff.active == 1:
        q = coeff.moduli[0]
        return centered(coeff.limbs[0], np.int64(q)).astype(object)
    product = 1
    for q in coeff.moduli:
        product *= q
    acc = np.zeros(coeff.ring_dim, dtype=object)
    for i, q in enumerate(coeff.moduli):
        q_hat = product // q
        inv = pow(q_hat % q, -1, q)
        t = mul_mod(coeff.limbs[i : i + 1], np.array([[inv]], dtype=np.int64), basis((q,)))
        acc = acc + t[0].astype(object) * q_hat
    acc = acc % product
    return np.where(acc > product // 2, acc - product, acc)


def drop_modulus(elem: RingElem) -> RingElem:
    """Divide by the last modulus with rounding and remove its limb."""
    if elem.active < 2:
        raise RingError("cannot drop the last remaining modulus")
    last_q = elem.moduli[-1]
    rest = elem.moduli[:-1]
    last = elem.limbs[-1:]
    if elem.is_ntt:
        last = ntt_array(last, elem.ring_dim, (last_q,), inverse=True)
    last = centered(last, np.int64(last_q))
    mods = basis(rest)
    reduced = np.mod(last, mods.col(2))
    if elem.is_ntt:
        reduced = ntt_array(reduced, elem.ring_dim, rest)
    diff = sub_mod(elem.limbs[:-1], reduced, mods.col(2))
    inv = np.array([pow(last_q, -1, q) for q in rest], dtype=np.int64).reshape(-1, 1)
    return RingElem(mul_mod(diff, inv, mods), rest, elem.is_ntt)


def keep_moduli(elem: RingElem, count: int) -> RingElem:
    """Keep the first count limbs (modulus dropping without division)."""
    if count < 1 or count > elem.active:
        raise RingError(f"cannot keep {count} of {elem.active} moduli")
    return RingElem(elem.limbs[:count], elem.moduli[:count], elem.is_ntt)


def automorphism(elem: RingElem, g: int) -> RingElem:
    """X -> X^g on an element in evaluation form."""
    if not elem.is_ntt:
        raise RingError("automorphism expects evaluation form")
    perm = galois_permutation(elem.ring_dim, g % (2 * elem.ring_dim))
    return RingElem(elem.limbs[:, perm], elem.moduli, True)


def sample_ternary(ring_dim: int, rng: np.random.Generator) -> np.ndarray:
    """Coefficients in {-1, 0, 1} with probabilities 1/4, 1/2, 1/4."""
    return rng.choice(np.array([-1, 0, 1], dtype=np.int64), size=ring_dim, p=[0.25, 0.5, 0.25])


def sample_gaussian(ring_dim: int, rng: np.random.Generator, sigma: float = DEFAULT_SIGMA, size: tuple[int, ...] = ()) -> np.ndarray:
    """Rounded Gaussian coefficients, resampled beyond TAIL_CUT * sigma."""
    shape = size + (ring_dim,)
    x = rng.normal(0.0, sigma, shape)
    bad = np.abs(x) > TAIL_CUT * sigma
    while bad.any():
        x[bad] = rng.normal(0.0, sigma, int(bad.sum()))
        bad = np.abs(x) > TAIL_CUT * sigma
    return np.rint(x).astype(np.int64)


def sample_uniform(ring_dim: int, moduli: tuple[int, ...], rng: np.random.Generator, size: tuple[int, ...] = ()) -> np.ndarray:
    """Uniform limbs, one row per modulus: shape (L, *size, N)."""
    return np.stack([rng.integers(0, q, size=size + (ring_dim,), dtype=np.int64) for q in moduli])


def ternary_elem(ring_dim: int, moduli: tuple[int, ...], rng: np.random.Generator) -> RingElem:
    return from_integers(sample_ternary(ring_dim, rng), moduli)


def gaussian_elem(ring_dim: int, moduli: tuple[int, ...], rng: np.random.Generator, sigma: float = DEFAULT_SIGMA) -> RingElem:
    return from_integers(sample_gaussian(ring_dim, rng, sigma), moduli)


def uniform_elem(ring_dim: int, moduli: tuple[int, ...], rng: np.random.Generator) -> RingElem:
    return RingElem(sample_uniform(ring_dim, moduli, rng), tuple(moduli), True)
