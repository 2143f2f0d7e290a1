"""Exact arithmetic over a prime field F_q.

Field elements are plain ints kept in [0, q); every operation lives on
:class:`PrimeField` so hot loops can inline ``% q`` arithmetic without
wrapper-object overhead.  The module also provides the dense linear
algebra used by the protocol decoder and the god-view oracle (Gaussian
elimination with first-nonzero pivoting, since F_q has no magnitude),
Horner polynomial evaluation, and a seedable symbol stream so every
noise draw in the system is reproducible.
"""

from __future__ import annotations

import random
from typing import Optional, Sequence

from .errors import FieldMismatchError, SingularMatrixError

# Miller-Rabin witnesses that make the test deterministic for n < 3.3e24.
_MR_WITNESSES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)

DEFAULT_MODULUS = 2147483647  # Mersenne prime 2^31 - 1; products fit 64 bits.


def is_prime(n: int) -> bool:
    """Deterministic primality test (Miller-Rabin, fixed witness set)."""
    if n < 2:
        return False
    for p in _MR_WITNESSES:
        if n % p == 0:
            return n == p
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in _MR_WITNESSES:
        x = pow(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


class PrimeField:
    """The prime field F_q.

    The modulus is validated at construction; all scalar methods take and
    return ints in [0, q).
    """

    __slots__ = ("q",)

    def __init__(self, q: int):
        if not isinstance(q, int) or not is_prime(q):
            raise ValueError(f"field modulus must be a prime integer, got {q!r}")
        self.q = q

    def __repr__(self) -> str:
        return f"PrimeField({self.q})"

    def __eq__(self, other: object) -> bool:
        return isinstance(other, PrimeField) and other.q == self.q

    def __hash__(self) -> int:
        return hash(("PrimeField", self.q))

    def require_same(self, other: "PrimeField") -> None:
        """Raise FieldMismatchError unless ``other`` uses the same modulus."""
        if self.q != other.q:
            raise FieldMismatchError(
                f"mixed moduli: F_{self.q} vs F_{other.q}"
            )

    # -- scalar arithmetic ------------------------------------------------

    def element(self, value: int) -> int:
        """Reduce an arbitrary int into [0, q)."""
        return value % self.q

    def add(self, a: int, b: int) -> int:
        return (a + b) % self.q

    def sub(self, a: int, b: int) -> int:
        return (a - b) % self.q

    def mul(self, a: int, b: int) -> int:
        return (a * b) % self.q

    def neg(self, a: int) -> int:
        return -a % self.q

    def inv(self, a: int) -> int:
        """Multiplicative inverse; raises ZeroDivisionError on 0."""
        a %= self.q
        if a == 0:
            raise ZeroDivisionError("0 has no multiplicative inverse")
        return pow(a, self.q - 2, self.q)

    def eval_poly(self, coeffs: Sequence[int], x: int) -> int:
        """Evaluate c[0] + c[1]*x + c[2]*x^2 + ... by Horner's rule."""
        q = self.q
        acc = 0
        for c in reversed(coeffs):
            acc = (acc * x + c) % q
        return acc

    # -- dense linear algebra ---------------------------------------------

    def matvec(self, matrix: Sequence[Sequence[int]], vec: Sequence[int]) -> list[int]:
        q = self.q
        return [sum(a * x for a, x in zip(row, vec)) % q for row in matrix]

    def solve(self, matrix: Sequence[Sequence[int]], rhs: Sequence[int]) -> list[int]:
        """Solve A x = b exactly by Gaussian elimination.

        Pivots on the first nonzero entry of each column (there is no
        "largest" element in F_q).  Raises SingularMatrixError when A has
        no unique solution.
        """
        n = len(matrix)
        if any(len(row) != n for row in matrix) or len(rhs) != n:
            raise ValueError("solve expects a square matrix and a matching vector")
        q = self.q
        rows = [[v % q for v in row] + [rhs[i] % q] for i, row in enumerate(matrix)]
        for col in range(n):
            pivot = next((r for r in range(col, n) if rows[r][col]), None)
            if pivot is None:
                raise SingularMatrixError(f"matrix is singular at column {col}")
            if pivot != col:
                rows[col], rows[pivot] = rows[pivot], rows[col]
            inv_p = pow(rows[col][col], q - 2, q)
            rows[col] = [v * inv_p % q for v in rows[col]]
            lead = rows[col]
            for r in range(n):
                if r != col and rows[r][col]:
                    factor = rows[r][col]
                    rows[r] = [(v - factor * lv) % q for v, lv in zip(rows[r], lead)]
        return [rows[i][n] for i in range(n)]

    def invert(self, matrix: Sequence[Sequence[int]]) -> list[list[int]]:
        """Matrix inverse by Gauss-Jordan; raises SingularMatrixError."""
        n = len(matrix)
        if any(len(row) != n for row in matrix):
            raise ValueError("invert expects a square matrix")
        q = self.q
        rows = [
            [v % q for v in row] + [1 if i == j else 0 for j in range(n)]
            for i, row in enumerate(matrix)
        ]
        for col in range(n):
            pivot = next((r for r in range(col, n) if rows[r][col]), None)
            if pivot is None:
                raise SingularMatrixError(f"matrix is singular at column {col}")
            if pivot != col:
                rows[col], rows[pivot] = rows[pivot], rows[col]
            inv_p = pow(rows[col][col], q - 2, q)
            rows[col] = [v * inv_p % q for v in rows[col]]
            lead = rows[col]
            for r in range(n):
                if r != col and rows[r][col]:
                    factor = rows[r][col]
                    rows[r] = [(v - factor * lv) % q for v, lv in zip(rows[r], lead)]
        return [rows[i][n:] for i in range(n)]


class SymbolSource:
    """Seedable deterministic stream of field symbols.

    Equal seeds yield identical streams.  That property is how one noise
    realization is shared: every call site that must observe the same
    noise (for example, the per-database views of one storage encoding)
    is handed an equally-seeded source.
    """

    def __init__(
        self,
        field: PrimeField,
        seed: Optional[int] = None,
        rng: Optional[random.Random] = None,
    ):
        self.field = field
        self._rng = rng if rng is not None else random.Random(seed)

    def symbol(self) -> int:
        """Uniform element of F_q."""
        return self._rng.randrange(self.field.q)

    def nonzero(self) -> int:
        """Uniform element of F_q \\ {0}."""
        return self._rng.randrange(1, self.field.q)

    def vector(self, length: int) -> list[int]:
        """Vector of ``length`` uniform elements."""
        rand = self._rng.randrange
        q = self.field.q
        return [rand(q) for _ in range(length)]
