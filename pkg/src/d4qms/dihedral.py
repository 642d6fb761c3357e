"""Algebra of the dihedral group of order eight and its representation theory.

Elements are encoded on three bits: the state (x2, x1, x0) stands for
s^x2 r^(2*x1 + x0), where r is the quarter rotation (r^4 = e) and s the
reflection (s^2 = e, s r s = r^-1).  The flat index is 4*x2 + 2*x1 + x0, so

    0: e    1: r    2: r^2   3: r^3
    4: s    5: sr   6: sr^2  7: sr^3

The group has five irreducible representations: four one-dimensional ones
(j = 0..3) and one two-dimensional faithful one (j = 4), which doubles as
the fundamental representation used for Wilson loops and kinetic terms.
"""

from __future__ import annotations

import numpy as np

ORDER = 8

E, R, R2, R3, S, SR, SR2, SR3 = range(8)

ELEMENT_NAMES = ("e", "r", "r2", "r3", "s", "sr", "sr2", "sr3")

IRREP_DIMS = (1, 1, 1, 1, 2)

#: Column/row ordering of the single-link irrep basis: the four scalar
#: irreps first, then the four matrix slots (alpha, beta) of the
#: two-dimensional irrep in row-major order.
IRREP_SLOTS = (
    (0, 0, 0),
    (1, 0, 0),
    (2, 0, 0),
    (3, 0, 0),
    (4, 0, 0),
    (4, 0, 1),
    (4, 1, 0),
    (4, 1, 1),
)

#: Conjugacy classes in a fixed order: {e}, {r, r^3}, {r^2}, {s, sr^2},
#: {sr, sr^3}.
CONJUGACY_CLASSES = ((E,), (R, R3), (R2,), (S, SR2), (SR, SR3))

CLASS_SIZES = tuple(len(c) for c in CONJUGACY_CLASSES)

#: Character table, rows indexed by irrep j = 0..4, columns by conjugacy
#: class in the order of CONJUGACY_CLASSES.
CHARACTER_TABLE = np.array(
    [
        [1, 1, 1, 1, 1],
        [1, 1, 1, -1, -1],
        [1, -1, 1, 1, -1],
        [1, -1, 1, -1, 1],
        [2, 0, -2, 0, 0],
    ],
    dtype=np.int64,
)


def _decode(g: int) -> tuple[int, int]:
    """Split an element index into (reflection bit, rotation exponent)."""
    return g >> 2, g & 3


def _encode(a: int, m: int) -> int:
    return ((a & 1) << 2) | (m & 3)


def _mul(g: int, h: int) -> int:
    # s^a r^m * s^b r^n = s^(a+b) r^(n + (-1)^b m) using r s = s r^-1.
    a, m = _decode(g)
    b, n = _decode(h)
    return _encode(a ^ b, n - m if b else n + m)


MUL_TABLE = np.array([[_mul(g, h) for h in range(8)] for g in range(8)], dtype=np.int64)

INV_TABLE = np.array(
    [next(h for h in range(8) if MUL_TABLE[g, h] == E) for g in range(8)],
    dtype=np.int64,
)


def mul(g: int, h: int) -> int:
    """Group product g * h."""
    return int(MUL_TABLE[g, h])


def inv(g: int) -> int:
    """Group inverse."""
    return int(INV_TABLE[g])


_SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]])
_I_SIGMA_Y = np.array([[0.0, 1.0], [-1.0, 0.0]])


def _fund(g: int) -> np.ndarray:
    a, m = _decode(g)
    out = np.eye(2)
    if a:
        out = _SIGMA_X.copy()
    return out @ np.linalg.matrix_power(_I_SIGMA_Y, m)


#: Fundamental (= j=4) representation matrices, shape (8, 2, 2), real.
FUND_REP = np.stack([_fund(g) for g in range(8)])


def fund_rep(g: int) -> np.ndarray:
    """Real 2x2 matrix of the fundamental representation."""
    return FUND_REP[g].copy()


_CLASS_OF = np.empty(8, dtype=np.int64)
for _ci, _cls in enumerate(CONJUGACY_CLASSES):
    for _g in _cls:
        _CLASS_OF[_g] = _ci

#: Characters per element, shape (5, 8).
CHARACTERS = CHARACTER_TABLE[:, _CLASS_OF]


def character(j: int, g: int) -> int:
    """Character of irrep j evaluated on element g."""
    return int(CHARACTERS[j, g])


def irrep_matrix(j: int, g: int) -> np.ndarray:
    """Representation matrix of element g in irrep j (1x1 or 2x2)."""
    if j < 4:
        return np.array([[float(CHARACTERS[j, g])]])
    return fund_rep(g)


def conjugacy_class_of(g: int) -> int:
    return int(_CLASS_OF[g])


def _build_fourier() -> np.ndarray:
    f = np.zeros((8, 8))
    for col, (j, a, b) in enumerate(IRREP_SLOTS):
        d = IRREP_DIMS[j]
        for g in range(8):
            f[g, col] = np.sqrt(d / 8.0) * irrep_matrix(j, g)[a, b]
    # Columns are the irrep basis vectors expressed over group states; the
    # transform gate maps group amplitudes onto irrep labels, so it is the
    # adjoint of that column matrix (real orthogonal here).
    return f.T.copy()


#: The single-link Fourier transform gate: real orthogonal 8x8 matrix whose
#: action sends the uniform superposition of group states to the trivial
#: irrep label (index 0).  Row (j, a, b), column g holds
#: sqrt(d_j / 8) * rho_j(g)[a, b]; equivalently the columns of its adjoint
#: are the irrep basis states.
FOURIER = _build_fourier()


def fourier_matrix() -> np.ndarray:
    """Return the 8x8 Fourier transform gate over the group register."""
    return FOURIER.copy()


def irrep_projector(j: int) -> np.ndarray:
    """Projector onto the irrep-j isotypic component, in the group basis.

    Entry (a, b) equals (d_j / 8) * chi_j(a^-1 b); ranks are d_j^2.
    """
    d = IRREP_DIMS[j]
    p = np.empty((8, 8))
    for a in range(8):
        for b in range(8):
            p[a, b] = d / 8.0 * CHARACTERS[j, MUL_TABLE[INV_TABLE[a], b]]
    return p


def left_mult_operator(g: int) -> np.ndarray:
    """Permutation matrix of |h> -> |g^-1 h| (left translation)."""
    op = np.zeros((8, 8))
    gi = INV_TABLE[g]
    for h in range(8):
        op[MUL_TABLE[gi, h], h] = 1.0
    return op


def right_mult_operator(g: int) -> np.ndarray:
    """Permutation matrix of |h> -> |h g| (right translation)."""
    op = np.zeros((8, 8))
    for h in range(8):
        op[MUL_TABLE[h, g], h] = 1.0
    return op


# Non-vanishing Clebsch-Gordan coefficients C^(J,A,B)_{(j',a',b');(j'',a'',b'')}
# defined by  rho_j'(g)_{a'b'} rho_j''(g)_{a''b''} = sum_J C rho_J(g)_{AB}
# (all representations real in this basis).  The list stores one entry per
# unordered factor pair; the lookup symmetrizes, since the product of real
# matrix elements does not depend on factor order.
_CG_ENTRIES = (
    ((0, 0, 0), (0, 0, 0), (0, 0, 0), 1.0),
    ((0, 0, 0), (1, 0, 0), (1, 0, 0), 1.0),
    ((0, 0, 0), (2, 0, 0), (2, 0, 0), 1.0),
    ((0, 0, 0), (3, 0, 0), (3, 0, 0), 1.0),
    ((0, 0, 0), (4, 0, 0), (4, 0, 0), 0.5),
    ((0, 0, 0), (4, 0, 1), (4, 0, 1), 0.5),
    ((0, 0, 0), (4, 1, 0), (4, 1, 0), 0.5),
    ((0, 0, 0), (4, 1, 1), (4, 1, 1), 0.5),
    ((1, 0, 0), (0, 0, 0), (1, 0, 0), 1.0),
    ((1, 0, 0), (2, 0, 0), (3, 0, 0), 1.0),
    ((1, 0, 0), (4, 0, 0), (4, 1, 1), 0.5),
    ((1, 0, 0), (4, 0, 1), (4, 1, 0), -0.5),
    ((1, 0, 0), (4, 1, 0), (4, 0, 1), -0.5),
    ((1, 0, 0), (4, 1, 1), (4, 0, 0), 0.5),
    ((2, 0, 0), (0, 0, 0), (2, 0, 0), 1.0),
    ((2, 0, 0), (1, 0, 0), (3, 0, 0), 1.0),
    ((2, 0, 0), (4, 0, 0), (4, 1, 1), 0.5),
    ((2, 0, 0), (4, 0, 1), (4, 1, 0), 0.5),
    ((2, 0, 0), (4, 1, 0), (4, 0, 1), 0.5),
    ((2, 0, 0), (4, 1, 1), (4, 0, 0), 0.5),
    ((3, 0, 0), (0, 0, 0), (3, 0, 0), 1.0),
    ((3, 0, 0), (1, 0, 0), (2, 0, 0), 1.0),
    ((3, 0, 0), (4, 0, 0), (4, 0, 0), 0.5),
    ((3, 0, 0), (4, 0, 1), (4, 0, 1), -0.5),
    ((3, 0, 0), (4, 1, 0), (4, 1, 0), -0.5),
    ((3, 0, 0), (4, 1, 1), (4, 1, 1), 0.5),
    ((4, 0, 0), (0, 0, 0), (4, 0, 0), 1.0),
    ((4, 0, 1), (0, 0, 0), (4, 0, 1), 1.0),
    ((4, 1, 0), (0, 0, 0), (4, 1, 0), 1.0),
    ((4, 1, 1), (0, 0, 0), (4, 1, 1), 1.0),
    ((4, 0, 0), (1, 0, 0), (4, 1, 1), 1.0),
    ((4, 0, 1), (1, 0, 0), (4, 1, 0), -1.0),
    ((4, 1, 0), (1, 0, 0), (4, 0, 1), -1.0),
    ((4, 1, 1), (1, 0, 0), (4, 0, 0), 1.0),
    ((4, 0, 0), (2, 0, 0), (4, 1, 1), 1.0),
    ((4, 0, 1), (2, 0, 0), (4, 1, 0), 1.0),
    ((4, 1, 0), (2, 0, 0), (4, 0, 1), 1.0),
    ((4, 1, 1), (2, 0, 0), (4, 0, 0), 1.0),
    ((4, 0, 0), (3, 0, 0), (4, 0, 0), 1.0),
    ((4, 0, 1), (3, 0, 0), (4, 0, 1), -1.0),
    ((4, 1, 0), (3, 0, 0), (4, 1, 0), -1.0),
    ((4, 1, 1), (3, 0, 0), (4, 1, 1), 1.0),
)


def _build_cg() -> dict:
    table = {}
    for target, left, right, value in _CG_ENTRIES:
        table[(target, left, right)] = value
        key = (target, right, left)
        if key not in table:
            table[key] = value
        elif table[key] != value:
            raise ValueError(f"inconsistent symmetrized entry {key}")
    return table


CG_TABLE = _build_cg()


def cg_coefficient(target: tuple, left: tuple, right: tuple) -> float:
    """Clebsch-Gordan coefficient; zero for slots absent from the table.

    Each argument is an irrep slot triple (j, alpha, beta); scalar irreps
    use (j, 0, 0).
    """
    return CG_TABLE.get((tuple(target), tuple(left), tuple(right)), 0.0)


def cg_relation_check() -> float:
    """Largest residual of the defining product relation over all slots.

    For every group element and every pair of irrep slots, the product of
    matrix elements must equal the Clebsch-Gordan combination of single
    irrep matrix elements.
    """
    worst = 0.0
    for left in IRREP_SLOTS:
        for right in IRREP_SLOTS:
            for g in range(8):
                lhs = (
                    irrep_matrix(left[0], g)[left[1], left[2]]
                    * irrep_matrix(right[0], g)[right[1], right[2]]
                )
                rhs = 0.0
                for target in IRREP_SLOTS:
                    c = cg_coefficient(target, left, right)
                    if c:
                        rhs += c * irrep_matrix(target[0], g)[target[1], target[2]]
                worst = max(worst, abs(lhs - rhs))
    return worst


def link_operator_real(alpha: int, beta: int) -> np.ndarray:
    """Matrix element operator U_{alpha beta}: diagonal in the group basis.

    The diagonal holds the fundamental matrix element of each element.
    """
    return np.diag(FUND_REP[:, alpha, beta].astype(float))


def link_operator_irrep(alpha: int, beta: int) -> np.ndarray:
    """U_{alpha beta} conjugated into the irrep basis.

    Built from the Clebsch-Gordan table: the (slot', slot'') entry equals
    sqrt(d_j' d_j'') / 2 * C^(4,alpha,beta)_{slot'; slot''}.
    """
    out = np.zeros((8, 8))
    target = (4, alpha, beta)
    for row, left in enumerate(IRREP_SLOTS):
        for col, right in enumerate(IRREP_SLOTS):
            c = cg_coefficient(target, left, right)
            if c:
                out[row, col] = (
                    np.sqrt(IRREP_DIMS[left[0]] * IRREP_DIMS[right[0]]) / 2.0 * c
                )
    return out


def transfer_eigenvalues(beta_gauge: float) -> np.ndarray:
    """Eigenvalues of the single-link heat-kernel transfer matrix per irrep.

    Closed forms: 6 + 2*cosh(2*beta) for the trivial irrep, 4*sinh(beta)^2
    for the three other scalars, 2*sinh(2*beta) for the two-dimensional one.
    """
    b = float(beta_gauge)
    return np.array(
        [
            6.0 + 2.0 * np.cosh(2.0 * b),
            4.0 * np.sinh(b) ** 2,
            4.0 * np.sinh(b) ** 2,
            4.0 * np.sinh(b) ** 2,
            2.0 * np.sinh(2.0 * b),
        ]
    )


def transfer_eigenvalues_by_characters(beta_gauge: float) -> np.ndarray:
    """Same eigenvalues obtained by character inversion of the heat kernel.

    lambda_j = (1/d_j) * sum_g exp(beta/2 * (chi_f(g) + chi_f(g^-1))) chi_j(g).
    """
    b = float(beta_gauge)
    chi_f = CHARACTERS[4].astype(float)
    weights = np.exp(0.5 * b * (chi_f + chi_f[INV_TABLE]))
    vals = np.empty(5)
    for j in range(5):
        vals[j] = weights @ CHARACTERS[j] / IRREP_DIMS[j]
    return vals


def shifted_casimir_coefficients(beta_gauge: float) -> np.ndarray:
    """Zero-point-shifted kinetic eigenvalues in units of exp(-2*beta).

    Returns (f_j - f_0) / exp(-2*beta) where f_j = -log lambda_j; for large
    beta these approach (0, 8, 8, 8, 6).
    """
    lam = transfer_eigenvalues(beta_gauge)
    f = -np.log(lam)
    return (f - f[0]) / np.exp(-2.0 * float(beta_gauge))


#: Transfer matrix eigenvalue per irrep slot (the 2d irrep fills four slots).
SLOT_IRREPS = np.array([j for (j, _, _) in IRREP_SLOTS])


def kinetic_link_hamiltonian(beta_gauge: float) -> np.ndarray:
    """Single-link electric Hamiltonian: minus the log of the transfer matrix.

    Real symmetric 8x8, diagonal in the irrep basis with eigenvalue
    -log lambda_j on every slot of irrep j.
    """
    lam = transfer_eigenvalues(beta_gauge)[SLOT_IRREPS]
    return FOURIER.T @ np.diag(-np.log(lam)) @ FOURIER


def transfer_link_matrix(beta_gauge: float) -> np.ndarray:
    """Single-link transfer matrix in the group basis.

    Entry (g', g) equals exp(beta * Tr rho_f(g'^-1 g)).
    """
    b = float(beta_gauge)
    tr = FUND_REP.trace(axis1=1, axis2=2)
    out = np.empty((8, 8))
    for gp in range(8):
        for g in range(8):
            out[gp, g] = np.exp(b * tr[MUL_TABLE[INV_TABLE[gp], g]])
    return out
