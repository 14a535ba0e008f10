"""Exception and warning taxonomy shared across the package.

Every error carries a short machine ``code`` so the command-line layer can
emit single-line diagnostics of the form ``E_<CODE>: message``.
"""

from __future__ import annotations


class MixedFormError(Exception):
    """Base class for all errors raised by this package."""

    code = "ERROR"

    def __init__(self, message: str, position: int | None = None):
        super().__init__(message)
        self.message = message
        self.position = position

    def __str__(self) -> str:
        if self.position is not None:
            return f"{self.message} (at position {self.position})"
        return self.message


# --- formula syntax ---------------------------------------------------------

class FormulaSyntaxError(MixedFormError):
    code = "PARSE"


class UnexpectedCharacter(FormulaSyntaxError):
    pass


class UnbalancedParentheses(FormulaSyntaxError):
    pass


class DanglingOperator(FormulaSyntaxError):
    pass


class EmptyRhs(FormulaSyntaxError):
    pass


class BarOutsideParentheses(FormulaSyntaxError):
    pass


class UnknownFunction(FormulaSyntaxError):
    pass


# --- term algebra -----------------------------------------------------------

class TermAlgebraError(MixedFormError):
    code = "FORMULA"


class GroupInFixedContext(TermAlgebraError):
    pass


class StructuralCallInFixedContext(TermAlgebraError):
    pass


# --- data ingestion ---------------------------------------------------------

class DataError(MixedFormError):
    code = "DATA"


class MalformedCsv(DataError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line

    def __str__(self) -> str:
        if self.line is not None:
            return f"{self.message} (line {self.line})"
        return self.message


class SchemaMismatch(DataError):
    pass


class EmptyTable(DataError):
    pass


class UnknownVariable(DataError):
    pass


class TransformOnFactor(DataError):
    pass


class DomainError(DataError):
    pass


# --- design matrices --------------------------------------------------------

class DesignError(MixedFormError):
    code = "MODEL"


class NumericGrouping(DesignError):
    pass


class EmptyGroup(DesignError):
    pass


# --- covariance structures --------------------------------------------------

class CovarianceError(MixedFormError):
    code = "MODEL"


class ParamCountMismatch(CovarianceError):
    pass


class NotPositiveDefinite(CovarianceError):
    pass


class RhoOutOfRange(CovarianceError):
    pass


class CyclicPedigree(CovarianceError):
    pass


class UnknownParentId(CovarianceError):
    pass


class AsymmetricInput(CovarianceError):
    pass


class InvalidTriplets(CovarianceError):
    pass


class DimensionMismatch(CovarianceError):
    pass


class RandomKronUnidentifiable(CovarianceError):
    pass


class UnsupportedStructure(CovarianceError):
    pass


# --- dialect lowering -------------------------------------------------------

class DialectError(MixedFormError):
    code = "MODEL"


class FactorWithDoubleBar(DialectError):
    pass


class StrDimensionMismatch(DialectError):
    pass


class UnknownLevel(DialectError):
    pass


class Untranslatable(DialectError):
    """A term with no equivalent in the target dialect.

    Not a failure: the command-line layer reports the reason and exits 0.
    """


# --- model assembly / fitting -----------------------------------------------

class FitError(MixedFormError):
    code = "FIT"


class SingularV(FitError):
    pass


class SingularXtVinvX(FitError):
    pass


class NotConverged(FitError):
    pass


class NonSeparableLayout(DesignError):
    """Observations do not fill the grid a separable residual requires."""


# --- warnings ----------------------------------------------------------------

class MixedFormWarning(UserWarning):
    pass


class RankDeficiencyWarning(MixedFormWarning):
    pass


class BoundaryWarning(MixedFormWarning):
    pass


class AbsentTermWarning(MixedFormWarning):
    """Removal (`- t`) of a term that is not present; treated as a no-op."""


class InterceptRewriteWarning(MixedFormWarning):
    """An explicit intercept was overridden later in the same sum.

    Covers constructs like ``1 + (-1 + x)`` whose simplification differs
    between ecosystems.
    """


class IdentifiabilityWarning(MixedFormWarning):
    """A residual product carried more than one scale; extras were absorbed."""
