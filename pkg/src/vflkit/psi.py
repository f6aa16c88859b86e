"""Two-party Diffie-Hellman-style private set intersection.

The client blinds hashed IDs with a secret exponent, the server raises them
to its own secret, and the client unblinds with the inverse exponent to
obtain the server-keyed hashes, which it tests against a Bloom-filter digest
of the server's set. Group arithmetic lives in the multiplicative subgroup
of quadratic residues modulo a safe prime, so only big-integer math is
needed.

``gmpy2`` is used for modular exponentiation when available (roughly 7x
faster than CPython's ``pow`` at 2048 bits); the pure-Python fallback is
functionally identical.
"""

from __future__ import annotations

import hashlib
import math
import secrets
import struct
from dataclasses import dataclass
from functools import lru_cache
from random import Random

from .errors import FormatError, PsiError

try:
    import gmpy2 as _gmpy2
except ImportError:  # pragma: no cover - exercised only without gmpy2
    _gmpy2 = None

__all__ = [
    "GroupParams",
    "SecretScalar",
    "modp_2048",
    "toy_64",
    "group_by_name",
    "hash_to_group",
    "blind",
    "evaluate",
    "derive_bloom_params",
    "BloomFilter",
    "build_server_digest",
    "unblind_match",
    "encode_elements",
    "decode_elements",
]


if _gmpy2 is not None:

    def powmod(base: int, exp: int, mod: int) -> int:
        return int(_gmpy2.powmod(base, exp, mod))

    def _jacobi(a: int, n: int) -> int:
        return int(_gmpy2.jacobi(a, n))

else:  # pragma: no cover

    powmod = pow

    def _jacobi(a: int, n: int) -> int:
        a %= n
        result = 1
        while a:
            while a % 2 == 0:
                a //= 2
                if n % 8 in (3, 5):
                    result = -result
            a, n = n, a
            if a % 4 == 3 and n % 4 == 3:
                result = -result
            a %= n
        return result if n == 1 else 0


# ---------------------------------------------------------------------------
# Group parameters
# ---------------------------------------------------------------------------

# RFC 3526 2048-bit MODP prime (a safe prime: p = 2q + 1 with q prime).
_MODP_2048_P = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD1"
    "29024E088A67CC74020BBEA63B139B22514A08798E3404DD"
    "EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245"
    "E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3D"
    "C2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F"
    "83655D23DCA3AD961C62F356208552BB9ED529077096966D"
    "670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9"
    "DE2BCBF6955817183995497CEA956AE515D2261898FA0510"
    "15728E5A8AACAA68FFFFFFFFFFFFFFFF",
    16,
)

# Largest 64-bit safe prime; small enough that unit tests can hammer it.
_TOY_64_P = 0xFFFFFFFFFFFFFA43


@dataclass(frozen=True)
class GroupParams:
    """Safe-prime group: modulus p = 2q + 1, subgroup order q, generator g of order q."""

    p: int
    q: int
    g: int

    def __post_init__(self):
        if self.p != 2 * self.q + 1:
            raise ValueError("p must equal 2q + 1")
        if not (1 < self.g < self.p):
            raise ValueError("generator out of range")
        if powmod(self.g, self.q, self.p) != 1:
            raise ValueError("generator is not in the order-q subgroup")

    @property
    def element_size(self) -> int:
        """Fixed byte width of a serialized group element."""
        return (self.p.bit_length() + 7) // 8

    def element_bytes(self, e: int) -> bytes:
        return e.to_bytes(self.element_size, "big")

    def contains(self, e: int) -> bool:
        """Membership in the order-q subgroup (the quadratic residues)."""
        return 1 <= e < self.p and _jacobi(e, self.p) == 1


@lru_cache(maxsize=None)
def modp_2048() -> GroupParams:
    """Production parameters: the 2048-bit MODP safe prime, g = 2^2 (a residue)."""
    p = _MODP_2048_P
    return GroupParams(p=p, q=(p - 1) // 2, g=4)


@lru_cache(maxsize=None)
def toy_64() -> GroupParams:
    """64-bit safe-prime group for fast tests. Not secure; never use in production."""
    p = _TOY_64_P
    return GroupParams(p=p, q=(p - 1) // 2, g=4)


def group_by_name(name: str) -> GroupParams:
    groups = {"modp2048": modp_2048, "toy64": toy_64}
    try:
        return groups[name.strip().lower()]()
    except KeyError:
        raise ValueError(f"unknown PSI group {name!r}; choose from {sorted(groups)}") from None


# ---------------------------------------------------------------------------
# Scalars and hashing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SecretScalar:
    """A secret exponent in [1, q-1]; invertible mod q since q is prime."""

    value: int

    @classmethod
    def generate(
        cls,
        params: GroupParams,
        rng: Random | None = None,
        bits: int = 256,
    ) -> "SecretScalar":
        """Sample a scalar of at most ``bits`` bits (clamped to the subgroup size).

        Short exponents keep blinding cheap in big groups without weakening
        the ~128-bit discrete-log security of the 2048-bit parameters. Pass a
        seeded ``random.Random`` for reproducible protocol runs; with ``None``
        the scalar comes from the OS CSPRNG.
        """
        upper = min(1 << bits, params.q)
        if rng is None:
            value = secrets.randbelow(upper - 1) + 1
        else:
            value = rng.randrange(1, upper)
        return cls(value)

    def inverse_mod(self, order: int) -> int:
        if self.value % order == 0:
            raise PsiError("scalar has no inverse")
        return pow(self.value, -1, order)


def _expand(data: bytes, attempt: int, nbytes: int) -> int:
    blocks = []
    for i in range((nbytes + 31) // 32):
        blocks.append(hashlib.sha256(struct.pack(">I", attempt) + data + struct.pack(">I", i)).digest())
    return int.from_bytes(b"".join(blocks)[:nbytes], "big")


def hash_to_group(data: bytes, params: GroupParams) -> int:
    """Deterministically map bytes into the order-q subgroup.

    SHA-256 counter expansion to (|p| + 8) bytes, reduced mod p, then squared
    to land in the quadratic residues. The degenerate squares 0 and 1 trigger
    a re-hash with an incremented counter.
    """
    nbytes = params.element_size + 8
    attempt = 0
    while True:
        h = _expand(data, attempt, nbytes) % params.p
        e = (h * h) % params.p
        if e not in (0, 1):
            return e
        attempt += 1


# ---------------------------------------------------------------------------
# Protocol steps
# ---------------------------------------------------------------------------


def blind(ids: list[bytes], k_c: SecretScalar, params: GroupParams) -> list[int]:
    """Client flow: H(id)^k_c for each id, order preserved."""
    return [powmod(hash_to_group(i, params), k_c.value, params.p) for i in ids]


def evaluate(blinded: list[int], k_s: SecretScalar, params: GroupParams) -> list[int]:
    """Server flow: raise each received element to k_s, order preserved.

    Matching is positional, so the server must not shuffle.
    """
    out = []
    for e in blinded:
        if not params.contains(e):
            raise PsiError(f"element {e} is not in the group subgroup")
        out.append(powmod(e, k_s.value, params.p))
    return out


def derive_bloom_params(n: int, fpr: float) -> tuple[int, int]:
    """Standard Bloom sizing: bits m and hash count for n items at the target FPR."""
    if n < 1:
        raise ValueError("capacity must be at least 1")
    if not (0.0 < fpr < 1.0):
        raise ValueError("false-positive rate must lie in (0, 1)")
    m = math.ceil(-n * math.log(fpr) / (math.log(2) ** 2))
    k_h = max(1, round(m / n * math.log(2)))
    return m, k_h


class BloomFilter:
    """Bit-array set digest with double hashing; no false negatives.

    Wire form: m (u64 BE), hash count (u32 BE), then the bit array padded to
    whole bytes (bit j lives at byte j >> 3, position j & 7, LSB first).
    """

    def __init__(self, capacity: int, target_fpr: float):
        self.capacity = capacity
        self.target_fpr = target_fpr
        self.num_bits, self.num_hashes = derive_bloom_params(capacity, target_fpr)
        self._bits = bytearray((self.num_bits + 7) // 8)

    def _indices(self, item: bytes):
        h1 = int.from_bytes(hashlib.sha256(b"\x01" + item).digest(), "big")
        h2 = int.from_bytes(hashlib.sha256(b"\x02" + item).digest(), "big")
        m = self.num_bits
        # h2 must not vanish mod m, or all probes collapse onto one bit and
        # the realized false-positive rate blows past the target.
        step = 1 + h2 % (m - 1) if m > 1 else 0
        return ((h1 + i * step) % m for i in range(self.num_hashes))

    def insert(self, item: bytes) -> None:
        for j in self._indices(item):
            self._bits[j >> 3] |= 1 << (j & 7)

    def __contains__(self, item: bytes) -> bool:
        return all(self._bits[j >> 3] >> (j & 7) & 1 for j in self._indices(item))

    def to_bytes(self) -> bytes:
        return struct.pack(">QI", self.num_bits, self.num_hashes) + bytes(self._bits)

    @classmethod
    def from_bytes(cls, data: bytes) -> "BloomFilter":
        if len(data) < 12:
            raise FormatError("Bloom digest shorter than its header")
        num_bits, num_hashes = struct.unpack_from(">QI", data)
        body = data[12:]
        if num_bits < 1 or num_hashes < 1:
            raise FormatError("Bloom digest header out of range")
        if len(body) != (num_bits + 7) // 8:
            raise FormatError("Bloom digest bit array length mismatch")
        bf = cls.__new__(cls)
        bf.capacity = 0  # unknown on the receiving side
        bf.target_fpr = 0.0
        bf.num_bits = num_bits
        bf.num_hashes = num_hashes
        bf._bits = bytearray(body)
        return bf


def build_server_digest(
    ids: list[bytes], k_s: SecretScalar, fpr: float, params: GroupParams
) -> BloomFilter:
    """Bloom digest of the server's set keyed by its secret: {H(id)^k_s}."""
    if not ids:
        raise ValueError("server set must be non-empty")
    bf = BloomFilter(len(ids), fpr)
    for i in ids:
        e = powmod(hash_to_group(i, params), k_s.value, params.p)
        bf.insert(params.element_bytes(e))
    return bf


def unblind_match(
    doubly_blinded: list[int],
    k_c: SecretScalar,
    digest: BloomFilter,
    params: GroupParams,
) -> list[int]:
    """Strip the client exponent and test membership in the server digest.

    ``doubly_blinded`` must be positionally aligned with the client's original
    id list; the returned indices refer to that list.
    """
    if k_c.value % params.q == 0:
        raise PsiError("client scalar must be invertible")
    inv = k_c.inverse_mod(params.q)
    matches = []
    for idx, e in enumerate(doubly_blinded):
        unblinded = powmod(e, inv, params.p)
        if params.element_bytes(unblinded) in digest:
            matches.append(idx)
    return matches


# ---------------------------------------------------------------------------
# Wire encoding of element lists
# ---------------------------------------------------------------------------


def encode_elements(elements: list[int]) -> bytes:
    """count (u32 BE), then per element: length (u16 BE) + big-endian magnitude."""
    parts = [struct.pack(">I", len(elements))]
    for e in elements:
        raw = e.to_bytes((e.bit_length() + 7) // 8 or 1, "big")
        if len(raw) > 0xFFFF:
            raise FormatError("element too large to frame")
        parts.append(struct.pack(">H", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def decode_elements(data: bytes) -> list[int]:
    if len(data) < 4:
        raise FormatError("element list shorter than its header")
    (count,) = struct.unpack_from(">I", data)
    offset = 4
    elements = []
    for _ in range(count):
        if offset + 2 > len(data):
            raise FormatError("truncated element list")
        (length,) = struct.unpack_from(">H", data, offset)
        offset += 2
        if offset + length > len(data):
            raise FormatError("truncated element")
        elements.append(int.from_bytes(data[offset : offset + length], "big"))
        offset += length
    if offset != len(data):
        raise FormatError("trailing bytes after element list")
    return elements
