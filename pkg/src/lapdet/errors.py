"""Exception types shared across the package."""


class LapdetError(Exception):
    """Base class for all package errors."""


class SchemaError(LapdetError):
    """A configuration document violates the expected schema."""


class NonUnitaryMatrix(LapdetError):
    """A connection or monodromy matrix is not unitary within tolerance."""


class NonScalarCovariance(LapdetError):
    """No scalar weight factor makes the walk covariance isotropic."""


class MeshIncompatible(LapdetError):
    """Requested mesh N is incompatible with a boundary split fraction."""


class PunctureOnEdge(LapdetError):
    """A puncture position lies on an edge of the scaled lattice."""


class UnreflectableEdge(LapdetError):
    """A boundary-crossing edge cannot be reflected across a single line."""


class NonUnitaryGauge(LapdetError):
    """A gauge transformation matrix is not unitary."""


class KernelMismatch(LapdetError):
    """Eigensolve kernel count disagrees with the covariant-constant dimension."""


class SizeLimit(LapdetError):
    """Operator exceeds the configured dense-solver size limit."""


class AngleNotRepresentable(LapdetError):
    """A cone/wedge angle is not representable on the given lattice."""


class TruncationBudgetExceeded(LapdetError):
    """A kernel was requested beyond the time certified by the truncation radius."""


class TailNotDecaying(LapdetError):
    """The large-time tail of a kernel difference does not fit a decaying model."""


class QuadratureFailure(LapdetError):
    """A quadrature did not converge to the requested tolerance."""


class OverlapViolation(LapdetError):
    """Model-assignment neighborhoods of distinct singularities overlap."""


class BudgetExceeded(LapdetError):
    """Key-formula residual exceeds the accumulated error budget."""


class AssemblyMismatch(LapdetError):
    """Corner constant assembled from local integrals disagrees with the closed form."""


class IllConditioned(LapdetError):
    """Least-squares fit matrix is too ill-conditioned to trust."""


class KernelJump(LapdetError):
    """Kernel dimension changed across a mesh sweep."""


class MissingVectors(LapdetError):
    """Operation requires eigenvectors but the spectrum has none."""
