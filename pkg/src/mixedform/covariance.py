"""Covariance structures for random effects (G) and residuals (R).

The structure set: identity and scaled identity, diagonal, unstructured,
AR1 correlation and covariance, externally supplied generalized inverses
(including pedigree relationship matrices), and Kronecker products of any
of these.  Each structure knows its parameter count, materializes to a
dense matrix at given parameter values, and maps its parameters to and
from an unconstrained working scale for optimization: log for variances,
atanh for autocorrelations, and Cholesky entries for unstructured blocks.

Kronecker components multiply in written order with the left factor
varying slowest, matching effect-major vectorization of random effects.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import block_diag as _block_diag
from scipy.linalg import toeplitz

from .errors import (
    AsymmetricInput,
    CyclicPedigree,
    DimensionMismatch,
    IdentifiabilityWarning,
    InvalidTriplets,
    MalformedCsv,
    NotPositiveDefinite,
    ParamCountMismatch,
    RandomKronUnidentifiable,
    RhoOutOfRange,
    UnknownParentId,
    UnsupportedStructure,
)

_PSD_TOL = 1e-8


class VarStructure:
    """Base class; subclasses implement the parameter/materialization contract."""

    dim: int
    label: str
    variance_type: bool = True

    def param_count(self) -> int:
        raise NotImplementedError

    def param_names(self) -> list[str]:
        raise NotImplementedError

    def materialize(self, params) -> np.ndarray:
        raise NotImplementedError

    def default_params(self, var_scale: float) -> np.ndarray:
        raise NotImplementedError

    def to_working(self, params) -> np.ndarray:
        raise NotImplementedError

    def from_working(self, w) -> np.ndarray:
        raise NotImplementedError

    def variance_param_indices(self) -> list[int]:
        """Indices of parameters that are variances (for boundary checks)."""
        return []

    def _check_count(self, params) -> np.ndarray:
        params = np.atleast_1d(np.asarray(params, dtype=float))
        if params.shape != (self.param_count(),):
            raise ParamCountMismatch(
                f"{self.describe()} takes {self.param_count()} parameter(s), "
                f"got {params.size}"
            )
        return params

    def describe(self) -> str:
        return self.label or type(self).__name__.lower()

    def qualified_names(self) -> list[str]:
        prefix = self.label + "." if self.label else ""
        return [prefix + n for n in self.param_names()]


@dataclass(eq=False)
class Id(VarStructure):
    dim: int
    label: str = ""
    variance_type = False

    def param_count(self):
        return 0

    def param_names(self):
        return []

    def materialize(self, params=()):
        self._check_count(params)
        return np.eye(self.dim)

    def default_params(self, var_scale):
        return np.empty(0)

    def to_working(self, params):
        return np.empty(0)

    def from_working(self, w):
        return np.empty(0)


@dataclass(eq=False)
class IdV(VarStructure):
    dim: int
    label: str = ""

    def param_count(self):
        return 1

    def param_names(self):
        return ["variance"]

    def materialize(self, params):
        (sigma2,) = self._check_count(params)
        return sigma2 * np.eye(self.dim)

    def default_params(self, var_scale):
        return np.array([var_scale])

    def to_working(self, params):
        return np.log(self._check_count(params))

    def from_working(self, w):
        return np.exp(np.asarray(w, dtype=float))

    def variance_param_indices(self):
        return [0]


@dataclass(eq=False)
class Diag(VarStructure):
    dim: int
    label: str = ""

    def param_count(self):
        return self.dim

    def param_names(self):
        return [f"variance[{i + 1}]" for i in range(self.dim)]

    def materialize(self, params):
        return np.diag(self._check_count(params))

    def default_params(self, var_scale):
        return np.full(self.dim, var_scale)

    def to_working(self, params):
        return np.log(self._check_count(params))

    def from_working(self, w):
        return np.exp(np.asarray(w, dtype=float))

    def variance_param_indices(self):
        return list(range(self.dim))


@dataclass(eq=False)
class US(VarStructure):
    """Unstructured covariance, parameterized by its lower triangle.

    Natural parameters are the covariance entries in row-major lower-triangle
    order ((1,1), (2,1), (2,2), ...).  The working scale holds the Cholesky
    factor's entries with logged diagonal, so optimization stays inside the
    positive semi-definite cone.
    """

    dim: int
    label: str = ""

    def param_count(self):
        return self.dim * (self.dim + 1) // 2

    def param_names(self):
        rows, cols = np.tril_indices(self.dim)
        return [f"cov[{i + 1},{j + 1}]" for i, j in zip(rows, cols)]

    def _fill(self, params) -> np.ndarray:
        m = np.zeros((self.dim, self.dim))
        rows, cols = np.tril_indices(self.dim)
        m[rows, cols] = params
        m[cols, rows] = params
        return m

    def materialize(self, params):
        params = self._check_count(params)
        m = self._fill(params)
        eigs = np.linalg.eigvalsh(m)
        if eigs.min() < -_PSD_TOL * max(1.0, abs(eigs.max())):
            raise NotPositiveDefinite(
                f"{self.describe()} is not positive semi-definite "
                f"(min eigenvalue {eigs.min():.3g})"
            )
        return m

    def default_params(self, var_scale):
        rows, cols = np.tril_indices(self.dim)
        return np.where(rows == cols, var_scale, 0.0)

    def to_working(self, params):
        m = self.materialize(params)
        jitter = _PSD_TOL * max(1.0, float(np.trace(m)) / self.dim)
        try:
            chol = np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            chol = np.linalg.cholesky(m + jitter * np.eye(self.dim))
        rows, cols = np.tril_indices(self.dim)
        entries = chol[rows, cols]
        diag = rows == cols
        entries[diag] = np.log(entries[diag])
        return entries

    def from_working(self, w):
        w = np.asarray(w, dtype=float)
        rows, cols = np.tril_indices(self.dim)
        entries = w.copy()
        diag = rows == cols
        entries[diag] = np.exp(entries[diag])
        chol = np.zeros((self.dim, self.dim))
        chol[rows, cols] = entries
        m = chol @ chol.T
        return m[rows, cols]

    def variance_param_indices(self):
        rows, cols = np.tril_indices(self.dim)
        return [k for k, (i, j) in enumerate(zip(rows, cols)) if i == j]


def _check_rho(rho: float, label: str) -> None:
    if not (-1.0 < rho < 1.0):
        raise RhoOutOfRange(f"{label}: autocorrelation {rho} outside (-1, 1)")


@dataclass(eq=False)
class AR1(VarStructure):
    """First-order autoregressive correlation: entry (i, j) is rho^|i-j|."""

    dim: int
    label: str = ""
    variance_type = False

    def param_count(self):
        return 1

    def param_names(self):
        return ["rho"]

    def materialize(self, params):
        (rho,) = self._check_count(params)
        _check_rho(rho, self.describe())
        return toeplitz(rho ** np.arange(self.dim))

    def default_params(self, var_scale):
        return np.array([0.0])

    def to_working(self, params):
        (rho,) = self._check_count(params)
        _check_rho(rho, self.describe())
        return np.array([np.arctanh(rho)])

    def from_working(self, w):
        return np.tanh(np.asarray(w, dtype=float))


@dataclass(eq=False)
class AR1V(VarStructure):
    """AR1 correlation scaled by a variance; parameters (rho, variance)."""

    dim: int
    label: str = ""

    def param_count(self):
        return 2

    def param_names(self):
        return ["rho", "variance"]

    def materialize(self, params):
        rho, sigma2 = self._check_count(params)
        _check_rho(rho, self.describe())
        return sigma2 * toeplitz(rho ** np.arange(self.dim))

    def default_params(self, var_scale):
        return np.array([0.0, var_scale])

    def to_working(self, params):
        rho, sigma2 = self._check_count(params)
        _check_rho(rho, self.describe())
        return np.array([np.arctanh(rho), np.log(sigma2)])

    def from_working(self, w):
        w = np.asarray(w, dtype=float)
        return np.array([np.tanh(w[0]), np.exp(w[1])])

    def variance_param_indices(self):
        return [1]


@dataclass(eq=False)
class GIV(VarStructure):
    """A known covariance up to scale: materializes to variance * K.

    ``K`` is the inverse of an externally supplied sparse generalized
    inverse, or a relationship matrix computed from a pedigree.
    """

    dim: int
    matrix: np.ndarray = field(repr=False, default=None)
    label: str = ""

    def param_count(self):
        return 1

    def param_names(self):
        return ["variance"]

    def materialize(self, params):
        (sigma2,) = self._check_count(params)
        return sigma2 * self.matrix

    def default_params(self, var_scale):
        return np.array([var_scale])

    def to_working(self, params):
        return np.log(self._check_count(params))

    def from_working(self, w):
        return np.exp(np.asarray(w, dtype=float))

    def variance_param_indices(self):
        return [0]

    @classmethod
    def from_covariance(cls, matrix: np.ndarray, label: str = "") -> "GIV":
        matrix = np.asarray(matrix, dtype=float)
        return cls(dim=matrix.shape[0], matrix=matrix, label=label)


@dataclass(eq=False)
class Kron(VarStructure):
    """Kronecker product of component structures, in written order.

    ``attach_scale`` adds one trailing global variance parameter; it is set
    by residual identifiability normalization when every component is a
    correlation structure.
    """

    components: tuple
    attach_scale: bool = False
    label: str = ""

    def __post_init__(self):
        self.components = tuple(self.components)
        self.dim = int(np.prod([c.dim for c in self.components]))

    def param_count(self):
        extra = 1 if self.attach_scale else 0
        return sum(c.param_count() for c in self.components) + extra

    def param_names(self):
        names = []
        for c in self.components:
            prefix = c.label + "." if c.label else ""
            names.extend(prefix + n for n in c.param_names())
        if self.attach_scale:
            names.append("variance")
        return names

    def _split(self, params):
        params = self._check_count(params)
        out = []
        start = 0
        for c in self.components:
            k = c.param_count()
            out.append(params[start : start + k])
            start += k
        scale = params[start] if self.attach_scale else None
        return out, scale

    def materialize(self, params):
        per_comp, scale = self._split(params)
        m = self.components[0].materialize(per_comp[0])
        for c, p in zip(self.components[1:], per_comp[1:]):
            m = np.kron(m, c.materialize(p))
        if scale is not None:
            m = scale * m
        return m

    def default_params(self, var_scale):
        parts = [c.default_params(var_scale) for c in self.components]
        if self.attach_scale:
            parts.append(np.array([var_scale]))
        return np.concatenate(parts) if parts else np.empty(0)

    def to_working(self, params):
        per_comp, scale = self._split(params)
        parts = [c.to_working(p) for c, p in zip(self.components, per_comp)]
        if scale is not None:
            parts.append(np.log(np.atleast_1d(scale)))
        return np.concatenate(parts) if parts else np.empty(0)

    def from_working(self, w):
        w = np.asarray(w, dtype=float)
        parts = []
        start = 0
        for c in self.components:
            k = c.param_count()
            parts.append(c.from_working(w[start : start + k]))
            start += k
        if self.attach_scale:
            parts.append(np.exp(w[start : start + 1]))
        return np.concatenate(parts) if parts else np.empty(0)

    def variance_param_indices(self):
        indices = []
        start = 0
        for c in self.components:
            indices.extend(start + i for i in c.variance_param_indices())
            start += c.param_count()
        if self.attach_scale:
            indices.append(start)
        return indices


@dataclass(eq=False)
class BlockDiag(VarStructure):
    """Block-diagonal structure: one independent block per level of a factor.

    Used for ``at(f)`` residual terms, where each level of ``f`` carries its
    own copy of a structure with its own parameters.
    """

    level_names: tuple[str, ...]
    blocks: tuple
    label: str = ""

    def __post_init__(self):
        self.level_names = tuple(self.level_names)
        self.blocks = tuple(self.blocks)
        if len(self.level_names) != len(self.blocks):
            raise DimensionMismatch("one block per level is required")
        self.dim = sum(b.dim for b in self.blocks)

    def param_count(self):
        return sum(b.param_count() for b in self.blocks)

    def param_names(self):
        names = []
        for level, block in zip(self.level_names, self.blocks):
            block_names = (
                block.qualified_names() if block.label else block.param_names()
            )
            names.extend(f"at[{level}].{n}" for n in block_names)
        return names

    def _split(self, params):
        params = self._check_count(params)
        out = []
        start = 0
        for b in self.blocks:
            k = b.param_count()
            out.append(params[start : start + k])
            start += k
        return out

    def materialize(self, params):
        per_block = self._split(params)
        return _block_diag(*[b.materialize(p) for b, p in zip(self.blocks, per_block)])

    def default_params(self, var_scale):
        parts = [b.default_params(var_scale) for b in self.blocks]
        return np.concatenate(parts) if parts else np.empty(0)

    def to_working(self, params):
        per_block = self._split(params)
        parts = [b.to_working(p) for b, p in zip(self.blocks, per_block)]
        return np.concatenate(parts) if parts else np.empty(0)

    def from_working(self, w):
        w = np.asarray(w, dtype=float)
        parts = []
        start = 0
        for b in self.blocks:
            k = b.param_count()
            parts.append(b.from_working(w[start : start + k]))
            start += k
        return np.concatenate(parts) if parts else np.empty(0)

    def variance_param_indices(self):
        indices = []
        start = 0
        for b in self.blocks:
            indices.extend(start + i for i in b.variance_param_indices())
            start += b.param_count()
        return indices


def materialize(vs: VarStructure, params) -> np.ndarray:
    """Materialize a structure at the given natural-scale parameters."""
    return vs.materialize(params)


def param_count(vs: VarStructure) -> int:
    return vs.param_count()


def check_identifiability(kron: Kron, context: str) -> Kron:
    """Normalize a Kronecker product's scale parameters for its context.

    In ``random`` context exactly one component must carry a variance;
    anything else is unidentifiable.  In ``residual`` context the product is
    rewritten to correlation components plus a single trailing scale, so the
    equivalent spellings (variance on either component, or on neither) all
    produce the same parameterization; more than one variance component
    triggers a warning before the extras are absorbed.
    """
    if context not in ("random", "residual"):
        raise ValueError(f"unknown context {context!r}")
    v = sum(1 for c in kron.components if c.variance_type)
    if context == "random":
        if v != 1:
            raise RandomKronUnidentifiable(
                f"separable random structure {kron.describe() or 'product'} has "
                f"{v} variance components; exactly one is identifiable"
            )
        return kron
    demoted = []
    for c in kron.components:
        if isinstance(c, (Id, AR1)):
            demoted.append(c)
        elif isinstance(c, IdV):
            demoted.append(Id(c.dim, label=c.label))
        elif isinstance(c, AR1V):
            demoted.append(AR1(c.dim, label=c.label))
        else:
            raise UnsupportedStructure(
                f"residual products support id/idv/ar1/ar1v components, "
                f"not {c.describe()}"
            )
    if v >= 2:
        warnings.warn(
            "residual product carries more than one variance; extras absorbed "
            "into a single scale",
            IdentifiabilityWarning,
            stacklevel=2,
        )
    return Kron(tuple(demoted), attach_scale=True, label=kron.label)


# --- pedigrees ----------------------------------------------------------------

@dataclass(frozen=True)
class Pedigree:
    """Ordered pedigree records of (individual, sire, dam); None = unknown."""

    records: tuple[tuple[str, str | None, str | None], ...]

    def ids(self) -> list[str]:
        return [r[0] for r in self.records]


def read_pedigree(path) -> Pedigree:
    """Read a pedigree CSV with columns id, sire, dam; 0 or empty = unknown."""
    path = Path(path)
    records = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MalformedCsv(f"{path} is empty", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise MalformedCsv("pedigree rows need 3 fields", line=lineno)
            ind, sire, dam = (f.strip() for f in row)
            records.append(
                (
                    ind,
                    sire if sire not in ("", "0", "NA") else None,
                    dam if dam not in ("", "0", "NA") else None,
                )
            )
    return Pedigree(tuple(records))


def _toposort(pedigree: Pedigree) -> list[int]:
    ids = pedigree.ids()
    index = {ind: i for i, ind in enumerate(ids)}
    if len(index) != len(ids):
        raise UnknownParentId("duplicate individual id in pedigree")
    for ind, sire, dam in pedigree.records:
        for parent in (sire, dam):
            if parent is not None and parent not in index:
                raise UnknownParentId(
                    f"parent {parent!r} of {ind!r} never declared as an individual"
                )
    order: list[int] = []
    state = [0] * len(ids)  # 0 unvisited, 1 in progress, 2 done

    def visit(i: int) -> None:
        if state[i] == 2:
            return
        if state[i] == 1:
            raise CyclicPedigree(
                f"pedigree cycle involving {pedigree.records[i][0]!r}"
            )
        state[i] = 1
        _, sire, dam = pedigree.records[i]
        for parent in (sire, dam):
            if parent is not None:
                visit(index[parent])
        state[i] = 2
        order.append(i)

    for i in range(len(ids)):
        visit(i)
    return order


def nrm_from_pedigree(pedigree: Pedigree) -> np.ndarray:
    """Additive relationship matrix by the tabular method.

    Individuals are processed parents-first; the diagonal is
    ``1 + 0.5 * A[sire, dam]`` and off-diagonals average the relationships
    to the parents, with unknown parents contributing zero.  Rows and
    columns follow the pedigree's declared record order.
    """
    order = _toposort(pedigree)
    ids = pedigree.ids()
    index = {ind: i for i, ind in enumerate(ids)}
    n = len(ids)
    position = {rec: k for k, rec in enumerate(order)}  # record -> topo slot
    a = np.zeros((n, n))
    for k, rec in enumerate(order):
        ind, sire, dam = pedigree.records[rec]
        s = position[index[sire]] if sire is not None else None
        d = position[index[dam]] if dam is not None else None
        if s is not None and d is not None:
            a[k, k] = 1.0 + 0.5 * a[s, d]
        else:
            a[k, k] = 1.0
        for j in range(k):
            contrib = 0.0
            if s is not None:
                contrib += a[j, s]
            if d is not None:
                contrib += a[j, d]
            a[j, k] = a[k, j] = 0.5 * contrib
    # permute back to declared record order
    inverse = np.empty(n, dtype=int)
    for slot, rec in enumerate(order):
        inverse[rec] = slot
    return a[np.ix_(inverse, inverse)]


# --- external generalized inverses ---------------------------------------------

@dataclass(frozen=True)
class SparseTriplets:
    """Lower-triangle sparse entries (0-based) of a symmetric matrix."""

    entries: tuple[tuple[int, int, float], ...]
    dim: int


def read_giv_triplets(path) -> SparseTriplets:
    """Read a triplet CSV (row, col, value; 1-based, lower triangle)."""
    path = Path(path)
    entries = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MalformedCsv(f"{path} is empty", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise MalformedCsv("triplet rows need 3 fields", line=lineno)
            try:
                r, c, value = int(row[0]), int(row[1]), float(row[2])
            except ValueError:
                raise MalformedCsv(f"bad triplet {row!r}", line=lineno) from None
            if r < 1 or c < 1:
                raise MalformedCsv("triplet indices are 1-based", line=lineno)
            entries.append((r - 1, c - 1, value))
    dim = 1 + max(max(r, c) for r, c, _ in entries) if entries else 0
    return SparseTriplets(tuple(entries), dim)


def load_giv(triplets: SparseTriplets, label: str = "") -> GIV:
    """Build a GIV structure from the sparse inverse's lower triangle.

    The supplied matrix is inverted once; materialization returns
    ``variance * inverse(supplied)``.  Factor level order must match the
    triplet index order.
    """
    n = triplets.dim
    if n == 0:
        raise InvalidTriplets("no triplet entries supplied")
    seen = set()
    m = np.zeros((n, n))
    for r, c, value in triplets.entries:
        if r < c:
            raise AsymmetricInput(
                f"triplet ({r + 1}, {c + 1}) lies above the diagonal; supply "
                "the lower triangle"
            )
        if (r, c) in seen:
            raise InvalidTriplets(f"duplicate triplet entry ({r + 1}, {c + 1})")
        seen.add((r, c))
        m[r, c] = value
        m[c, r] = value
    try:
        chol = np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("supplied generalized inverse is not positive definite")
    identity = np.eye(n)
    inv_chol = np.linalg.solve(chol, identity)
    k = inv_chol.T @ inv_chol
    k = 0.5 * (k + k.T)
    return GIV(dim=n, matrix=k, label=label)
