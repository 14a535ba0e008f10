"""mixedform: a symbolic model-formula compiler and linear mixed model engine.

Parses Wilkinson-style formulae in two random-effect dialects (grouped terms
and structural covariance functions), lowers them to design matrices and
covariance structures, fits models by REML, and translates terms between
dialects where an equivalent exists.
"""

__version__ = "0.1.0"

from .covariance import (
    AR1,
    AR1V,
    US,
    BlockDiag,
    Diag,
    GIV,
    Id,
    IdV,
    Kron,
    Pedigree,
    SparseTriplets,
    VarStructure,
    check_identifiability,
    load_giv,
    materialize,
    nrm_from_pedigree,
    param_count,
    read_giv_triplets,
    read_pedigree,
)
from .data import DataTable, FactorColumn, NumericColumn, eval_atom, read_csv
from .design import DesignMatrix, RandomBlock, build_fixed
from .dialects import (
    RandomTermSpec,
    ResidualPlan,
    Translation,
    lower_grouped,
    lower_rcov,
    lower_structural,
    translate,
)
from .formula import Formula, parse, parse_formula, tokenize, unparse
from .model import ModelSpec, build_model
from .reml import (
    FitOptions,
    FitResult,
    blup,
    fd_gradient,
    fit,
    gls_coefficients,
    reml_neg2loglik,
)
from .terms import Term, TermList, canonical_text, expand

__all__ = [
    "__version__",
    "AR1",
    "AR1V",
    "US",
    "BlockDiag",
    "DataTable",
    "DesignMatrix",
    "Diag",
    "FactorColumn",
    "FitOptions",
    "FitResult",
    "Formula",
    "GIV",
    "Id",
    "IdV",
    "Kron",
    "ModelSpec",
    "NumericColumn",
    "Pedigree",
    "RandomBlock",
    "RandomTermSpec",
    "ResidualPlan",
    "SparseTriplets",
    "Term",
    "TermList",
    "Translation",
    "VarStructure",
    "blup",
    "build_fixed",
    "build_model",
    "canonical_text",
    "check_identifiability",
    "eval_atom",
    "expand",
    "fd_gradient",
    "fit",
    "gls_coefficients",
    "load_giv",
    "lower_grouped",
    "lower_rcov",
    "lower_structural",
    "materialize",
    "nrm_from_pedigree",
    "param_count",
    "parse",
    "parse_formula",
    "read_csv",
    "read_giv_triplets",
    "read_pedigree",
    "reml_neg2loglik",
    "tokenize",
    "translate",
    "unparse",
]
