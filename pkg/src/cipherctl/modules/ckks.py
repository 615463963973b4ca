"""
Approximate-arithmetic (CKKS-style) homomorphic encryption over the RNS ring.

Ciphertexts are pairs (c0, c1) in evaluation form with m ~ c0 + c1*s. Fresh encodings use the
nominal scale 2^(scale_bits * depth), where depth is 1 for fresh or rescaled ciphertexts and 2 for
unrescaled products. Scales are booked exactly from there on: a rescale divides by the modulus it
drops. Level counts the moduli dropped from the chain.
"""

import hashlib
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from ..utils.errors import BudgetExhaustedError, EncodingError, KeyMissingError, RingError, ScaleError
from . import ring
from .ring import RingElem, RingParams

logger = logging.getLogger(__name__)

CT_MAGIC = b"CKCT"
KEY_MAGIC = b"CKSK"
FORMAT_VERSION = 2
_HEADER = struct.Struct("<4sHIHHBd")
# relative scale difference tolerated when adding; depth mismatches differ by 2^scale_bits
SCALE_RTOL = 1e-5


@dataclass(frozen=True)
class Plaintext:
    poly: RingElem
    level: int
    depth: int
    scale: float


@dataclass(frozen=True)
class Ciphertext:
    c0: RingElem
    c1: RingElem
    level: int
    depth: int
    scale: float

    @property
    def active(self) -> int:
        return self.c0.active

    @property
    def moduli(self) -> tuple[int, ...]:
        return self.c0.moduli


@dataclass(frozen=True)
class SwitchingKey:
    """Digit-decomposed key for s' -> s; arrays shaped (L + 1, L, N) over chain + (P,)."""

    b: np.ndarray
    a: np.ndarray


@dataclass
class KeyMaterial:
    """Secret key (client only), public key, relinearization key and rotation keys."""

    pk: tuple[RingElem, RingElem]
    evk: SwitchingKey
    rot_keys: dict[int, SwitchingKey] = field(default_factory=dict)
    sk: RingElem | None = None

    def public(self) -> "KeyMaterial":
        """The server's view: everything except the secret key."""
        return KeyMaterial(pk=self.pk, evk=self.evk, rot_keys=dict(self.rot_keys), sk=None)


class CKKSContext:
    """Encoder, key generator and primitive homomorphic operations for one parameter set."""

    def __init__(self, params: RingParams):
        self.params = params
        self.ring_dim = params.ring_dim
        self.slots = params.slots
        self.chain = params.moduli
        self.ext = params.moduli + (params.special,)
        self.scale_base = float(2**params.scale_bits)
        two_n = 2 * self.ring_dim
        exps = np.array([pow(5, j, two_n) for j in range(self.slots)], dtype=np.int64)
        self._slot_idx = (exps - 1) // 2
        self._conj_idx = (two_n - exps - 1) // 2
        k = np.arange(self.ring_dim)
        self._zeta = np.exp(1j * np.pi * k / self.ring_dim)
        self._zeta_inv = np.conj(self._zeta)
        logger.debug("CKKS context N=%d, %d moduli, %d slots", self.ring_dim, len(self.chain), self.slots)

    # --- scale bookkeeping ---------------------------------------------------

    @property
    def max_level(self) -> int:
        return len(self.chain) - 1

    def nominal_scale(self, depth: int) -> float:
        return self.scale_base**depth

    def moduli_at(self, level: int) -> tuple[int, ...]:
        if level < 0 or level > self.max_level:
            raise BudgetExhaustedError(f"level {level} is outside the chain (max {self.max_level})")
        return self.chain[: len(self.chain) - level]

    # --- encoding ------------------------------------------------------------

    def encode(self, values, level: int = 0, depth: int = 1, scale: float | None = None) -> Plaintext:
        """Encode up to slots real (or complex) values at the nominal scale of depth, or at scale."""
        vec = np.asarray(values)
        if vec.ndim != 1 or vec.size > self.slots:
            raise EncodingError(f"expected at most {self.slots} values, got shape {vec.shape}")
        if depth not in (1, 2):
            raise ScaleError(f"plaintext depth must be 1 or 2, got {depth}")
        moduli = self.moduli_at(level)
        z = np.zeros(self.slots, dtype=np.complex128)
        z[: vec.size] = vec
        evals = np.zeros(self.ring_dim, dtype=np.complex128)
        evals[self._slot_idx] = z
        evals[self._conj_idx] = np.conj(z)
        coeffs = np.real(np.fft.fft(evals) / self.ring_dim * self._zeta_inv)
        scale = self.nominal_scale(depth) if scale is None else float(scale)
        scaled = np.rint(coeffs * scale)
        bound = 1
        for q in moduli:
            bound *= q
        if np.max(np.abs(scaled), initial=0.0) >= bound / 2:
            raise EncodingError("encoded coefficients exceed the active modulus")
        if np.max(np.abs(scaled), initial=0.0) < 2.0**62:
            ints = scaled.astype(np.int64)
        else:
            ints = np.array([int(c) for c in scaled], dtype=object)
        return Plaintext(ring.from_integers(ints, moduli, to_ntt=True), level, depth, scale)

    def decode_poly(self, poly: RingElem, scale: float) -> np.ndarray:
        coeffs = ring.to_integers(poly).astype(np.float64) / scale
        evals = self.ring_dim * np.fft.ifft(coeffs * self._zeta)
        return evals[self._slot_idx]

    def decode(self, pt: Plaintext) -> np.ndarray:
        """Real parts of the slot values."""
        return np.real(self.decode_poly(pt.poly, pt.scale))

    # --- keys ----------------------------------------------------------------

    def keygen(self, rng: np.random.Generator, rotations=()) -> KeyMaterial:
        """Fresh secret, public, relinearization and rotation keys."""
        s_int = ring.sample_ternary(self.ring_dim, rng)
        sk = ring.from_integers(s_int, self.ext, to_ntt=True)
        s_chain = ring.keep_moduli(sk, len(self.chain))
        a = ring.uniform_elem(self.ring_dim, self.chain, rng)
        e = ring.ntt_forward(ring.gaussian_elem(self.ring_dim, self.chain, rng))
        pk = (e - a * s_chain, a)
        evk = self.ksgen(sk, sk * sk, rng)
        keys = KeyMaterial(pk=pk, evk=evk, sk=sk)
        self.add_rotation_keys(keys, rotations, rng)
        return keys

    def add_rotation_keys(self, keys: KeyMaterial, rotations, rng: np.random.Generator):
        if keys.sk is None:
            raise KeyMissingError("rotation keys need the secret key")
        for k in sorted({int(r) % self.slots for r in rotations} - {0}):
            if k in keys.rot_keys:
                continue
            g = pow(5, k, 2 * self.ring_dim)
            keys.rot_keys[k] = self.ksgen(keys.sk, ring.automorphism(keys.sk, g), rng)
        logger.debug("%d rotation keys available", len(keys.rot_keys))

    def ksgen(self, sk: RingElem, s_prime: RingElem, rng: np.random.Generator) -> SwitchingKey:
        """Switching key from s_prime to sk, one digit per chain modulus, special prime P."""
        digits = len(self.chain)
        mods = ring.basis(self.ext)
        q = mods.col(3)
        a = ring.sample_uniform(self.ring_dim, self.ext, rng, size=(digits,))
        e_int = ring.sample_gaussian(self.ring_dim, rng, size=(digits,))
        e = ring.ntt_array(np.mod(e_int[None, :, :], q), self.ring_dim, self.ext)
        b = ring.sub_mod(e, ring.mul_mod(a, sk.limbs[:, None, :], mods), q)
        special = self.params.special
        for j, qj in enumerate(self.chain):
            shifted = ring.mul_mod(s_prime.limbs[j : j + 1], np.array([[special % qj]], dtype=np.int64), ring.basis((qj,)))
            b[j, j] = ring.add_mod(b[j, j], shifted[0], np.int64(qj))
        return SwitchingKey(b=b, a=a)

    def _decompose(self, d: RingElem) -> np.ndarray:
        """Digits of d lifted to the extended basis, evaluation form: (l + 1, l, N)."""
        coeff = ring.ntt_array(d.limbs, self.ring_dim, d.moduli, inverse=True)
        digits = ring.centered(coeff, ring.basis(d.moduli).col(2))
        ext = d.moduli + (self.params.special,)
        lifted = np.mod(digits[None, :, :], ring.basis(ext).col(3))
        return ring.ntt_array(lifted, self.ring_dim, ext)

    def _apply_key(self, lifted: np.ndarray, moduli: tuple[int, ...], key: SwitchingKey) -> tuple[RingElem, RingElem]:
        active = len(moduli)
        ext = moduli + (self.params.special,)
        rows = list(range(active)) + [len(self.chain)]
        mods = ring.basis(ext)
        q = mods.col(2)
        prod_b = ring.mul_mod(lifted, key.b[rows][:, :active, :], mods)
        prod_a = ring.mul_mod(lifted, key.a[rows][:, :active, :], mods)
        acc_b, acc_a = prod_b[:, 0, :], prod_a[:, 0, :]
        for i in range(1, active):
            acc_b = ring.add_mod(acc_b, prod_b[:, i, :], q)
            acc_a = ring.add_mod(acc_a, prod_a[:, i, :], q)
        k0 = ring.drop_modulus(RingElem(acc_b, ext, True))
        k1 = ring.drop_modulus(RingElem(acc_a, ext, True))
        return k0, k1

    def key_switch(self, d: RingElem, key: SwitchingKey) -> tuple[RingElem, RingElem]:
        return self._apply_key(self._decompose(d), d.moduli, key)

    # --- encryption ----------------------------------------------------------

    def encrypt(self, pk: tuple[RingElem, RingElem], pt: Plaintext, rng: np.random.Generator) -> Ciphertext:
        moduli = pt.poly.moduli
        count = len(moduli)
        b, a = ring.keep_moduli(pk[0], count), ring.keep_moduli(pk[1], count)
        v = ring.ntt_forward(ring.ternary_elem(self.ring_dim, moduli, rng))
        e0 = ring.ntt_forward(ring.gaussian_elem(self.ring_dim, moduli, rng))
        e1 = ring.ntt_forward(ring.gaussian_elem(self.ring_dim, moduli, rng))
        return Ciphertext(v * b + pt.poly + e0, v * a + e1, pt.level, pt.depth, pt.scale)

    def decrypt(self, sk: RingElem, ct: Ciphertext) -> Plaintext:
        if sk is None:
            raise KeyMissingError("decryption needs the secret key")
        s = ring.keep_moduli(sk, ct.active)
        return Plaintext(ct.c0 + ct.c1 * s, ct.level, ct.depth, ct.scale)

    def decrypt_decode(self, sk: RingElem, ct: Ciphertext) -> np.ndarray:
        return self.decode(self.decrypt(sk, ct))

    # --- evaluation ----------------------------------------------------------

    def drop_to_level(self, ct: Ciphertext, level: int) -> Ciphertext:
        if level < ct.level:
            raise ScaleError(f"cannot raise a ciphertext from level {ct.level} to {level}")
        if level == ct.level:
            return ct
        count = len(self.moduli_at(level))
        return Ciphertext(ring.keep_moduli(ct.c0, count), ring.keep_moduli(ct.c1, count), level, ct.depth, ct.scale)

    def align(self, *cts: Ciphertext) -> list[Ciphertext]:
        level = max(ct.level for ct in cts)
        return [self.drop_to_level(ct, level) for ct in cts]

    @staticmethod
    def _check_scales(a, b):
        if a.depth != b.depth or not np.isclose(a.scale, b.scale, rtol=SCALE_RTOL, atol=0.0):
            raise ScaleError(f"scale mismatch: depth {a.depth} vs {b.depth}")

    def add(self, a: Ciphertext, b: Ciphertext | Plaintext) -> Ciphertext:
        if isinstance(b, Plaintext):
            self._check_scales(a, b)
            if b.level != a.level:
                raise ScaleError(f"plaintext level {b.level} does not match ciphertext level {a.level}")
            return Ciphertext(a.c0 + b.poly, a.c1, a.level, a.depth, a.scale)
        self._check_scales(a, b)
        a, b = self.align(a, b)
        return Ciphertext(a.c0 + b.c0, a.c1 + b.c1, a.level, a.depth, a.scale)

    def sub(self, a: Ciphertext, b: Ciphertext | Plaintext) -> Ciphertext:
        if isinstance(b, Plaintext):
            return self.add(a, Plaintext(-b.poly, b.level, b.depth, b.scale))
        return self.add(a, self.negate(b))

    @staticmethod
    def negate(a: Ciphertext) -> Ciphertext:
        return Ciphertext(-a.c0, -a.c1, a.level, a.depth, a.scale)

    def cmult(self, ct: Ciphertext, pt: Plaintext) -> Ciphertext:
        if ct.depth != 1 or pt.depth != 1:
            raise ScaleError("products take depth-1 operands; rescale first")
        if pt.level != ct.level:
            raise ScaleError(f"plaintext level {pt.level} does not match ciphertext level {ct.level}")
        return Ciphertext(ct.c0 * pt.poly, ct.c1 * pt.poly, ct.level, 2, ct.scale * pt.scale)

    def _tensor(self, a: Ciphertext, b: Ciphertext) -> tuple[RingElem, RingElem, RingElem]:
        if a.depth != 1 or b.depth != 1:
            raise ScaleError("products take depth-1 operands; rescale first")
        return a.c0 * b.c0, a.c0 * b.c1 + a.c1 * b.c0, a.c1 * b.c1

    def mult(self, a: Ciphertext, b: Ciphertext, evk: SwitchingKey) -> Ciphertext:
        a, b = self.align(a, b)
        d0, d1, d2 = self._tensor(a, b)
        k0, k1 = self.key_switch(d2, evk)
        return Ciphertext(d0 + k0, d1 + k1, a.level, 2, a.scale * b.scale)

    def mult_sum(self, pairs: list[tuple[Ciphertext, Ciphertext]], evk: SwitchingKey) -> Ciphertext:
        """Sum of products with a single relinearization."""
        if not pairs:
            raise ValueError("empty product sum")
        level = max(max(a.level, b.level) for a, b in pairs)
        acc = None
        scale = None
        for a, b in pairs:
            a, b = self.drop_to_level(a, level), self.drop_to_level(b, level)
            terms = self._tensor(a, b)
            if acc is None:
                acc, scale = list(terms), a.scale * b.scale
            else:
                if not np.isclose(scale, a.scale * b.scale, rtol=SCALE_RTOL, atol=0.0):
                    raise ScaleError("product scales differ inside a sum")
                acc = [x + y for x, y in zip(acc, terms)]
        k0, k1 = self.key_switch(acc[2], evk)
        return Ciphertext(acc[0] + k0, acc[1] + k1, level, 2, scale)

    def rescale(self, ct: Ciphertext) -> Ciphertext:
        if ct.depth != 2:
            raise ScaleError("only depth-2 ciphertexts are rescaled")
        if ct.active < 2:
            raise BudgetExhaustedError("no modulus left to rescale")
        try:
            c0, c1 = ring.drop_modulus(ct.c0), ring.drop_modulus(ct.c1)
        except RingError as exc:
            raise BudgetExhaustedError(str(exc)) from exc
        return Ciphertext(c0, c1, ct.level + 1, 1, ct.scale / ct.moduli[-1])

    def _rotation_key(self, k: int, rot_keys: dict[int, SwitchingKey]) -> SwitchingKey:
        try:
            return rot_keys[k]
        except KeyError as exc:
            raise KeyMissingError(f"no rotation key for index {k}") from exc

    def rotate(self, ct: Ciphertext, k: int, rot_keys: dict[int, SwitchingKey]) -> Ciphertext:
        """Left rotation of the slot vector by k."""
        k %= self.slots
        if k == 0:
            return ct
        key = self._rotation_key(k, rot_keys)
        g = pow(5, k, 2 * self.ring_dim)
        c0, c1 = ring.automorphism(ct.c0, g), ring.automorphism(ct.c1, g)
        k0, k1 = self.key_switch(c1, key)
        return Ciphertext(c0 + k0, k1, ct.level, ct.depth, ct.scale)

    def rotate_hoisted(self, ct: Ciphertext, ks, rot_keys: dict[int, SwitchingKey]) -> dict[int, Ciphertext]:
        """Several rotations of one ciphertext sharing a single digit decomposition."""
        lifted = self._decompose(ct.c1)
        out = {}
        for k in ks:
            k_norm = k % self.slots
            if k_norm == 0:
                out[k] = ct
                continue
            key = self._rotation_key(k_norm, rot_keys)
            g = pow(5, k_norm, 2 * self.ring_dim)
            perm = ring.galois_permutation(self.ring_dim, g)
            k0, k1 = self._apply_key(lifted[:, :, perm], ct.moduli, key)
            out[k] = Ciphertext(ring.automorphism(ct.c0, g) + k0, k1, ct.level, ct.depth, ct.scale)
        return out

    # --- serialization -------------------------------------------------------

    def serialize(self, ct: Ciphertext) -> bytes:
        header = _HEADER.pack(CT_MAGIC, FORMAT_VERSION, self.ring_dim, ct.active, ct.level, ct.depth, ct.scale)
        body = np.concatenate([ct.c0.limbs, ct.c1.limbs]).astype("<i8").tobytes()
        return header + body

    def deserialize(self, data: bytes) -> Ciphertext:
        magic, version, ring_dim, count, level, depth, scale = _HEADER.unpack_from(data)
        if magic != CT_MAGIC or version != FORMAT_VERSION:
            raise EncodingError("not a ciphertext blob of a supported version")
        if ring_dim != self.ring_dim or count != len(self.chain) - level:
            raise EncodingError(f"ciphertext (N={ring_dim}, {count} moduli) does not fit this context")
        limbs = np.frombuffer(data, dtype="<i8", offset=_HEADER.size).astype(np.int64)
        limbs = limbs.reshape(2, count, ring_dim)
        moduli = self.chain[:count]
        return Ciphertext(
            RingElem(limbs[0].copy(), moduli, True),
            RingElem(limbs[1].copy(), moduli, True),
            level,
            depth,
            scale,
        )

    def serialize_key(self, key: SwitchingKey) -> bytes:
        header = _HEADER.pack(KEY_MAGIC, FORMAT_VERSION, self.ring_dim, len(self.chain), 0, 0, 0.0)
        return header + np.stack([key.b, key.a]).astype("<i8").tobytes()

    def deserialize_key(self, data: bytes) -> SwitchingKey:
        magic, version, ring_dim, count, _, _, _ = _HEADER.unpack_from(data)
        if magic != KEY_MAGIC or version != FORMAT_VERSION or ring_dim != self.ring_dim or count != len(self.chain):
            raise EncodingError("switching key blob does not fit this context")
        arr = np.frombuffer(data, dtype="<i8", offset=_HEADER.size).astype(np.int64)
        arr = arr.reshape(2, count + 1, count, ring_dim)
        return SwitchingKey(b=arr[0].copy(), a=arr[1].copy())


def digest(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


class Evaluator:
    """Rescaling wrappers over a context and a public key set."""

    def __init__(self, ctx: CKKSContext, keys: KeyMaterial, hoisted: bool = False):
        self.ctx = ctx
        self.keys = keys
        self.hoisted = hoisted

    @property
    def slots(self) -> int:
        return self.ctx.slots

    def encode_at(self, values, ct: Ciphertext) -> Plaintext:
        return self.ctx.encode(values, level=ct.level, depth=ct.depth, scale=ct.scale)

    def add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        return self.ctx.add(a, b)

    def sub(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        return self.ctx.sub(a, b)

    def neg(self, a: Ciphertext) -> Ciphertext:
        return self.ctx.negate(a)

    def add_plain(self, ct: Ciphertext, values) -> Ciphertext:
        return self.ctx.add(ct, self.encode_at(values, ct))

    def mul_plain(self, ct: Ciphertext, values) -> Ciphertext:
        return self.ctx.rescale(self.ctx.cmult(ct, self.ctx.encode(values, level=ct.level)))

    def mul(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        return self.ctx.rescale(self.ctx.mult(a, b, self.keys.evk))

    def dot(self, pairs: list[tuple[Ciphertext, Ciphertext]]) -> Ciphertext:
        return self.ctx.rescale(self.ctx.mult_sum(pairs, self.keys.evk))

    def rot(self, ct: Ciphertext, k: int) -> Ciphertext:
        return self.ctx.rotate(ct, k, self.keys.rot_keys)

    def rot_many(self, ct: Ciphertext, ks) -> dict[int, Ciphertext]:
        if self.hoisted:
            return self.ctx.rotate_hoisted(ct, ks, self.keys.rot_keys)
        return {k: self.rot(ct, k) for k in ks}

    def drop_to(self, ct: Ciphertext, level: int) -> Ciphertext:
        return self.ctx.drop_to_level(ct, level)
