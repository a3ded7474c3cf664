"""Exception types shared across the package."""


class SplineflowError(Exception):
    """Base class for all package-specific errors."""


# --- manifold geometry ------------------------------------------------------

class DegeneratePoint(SplineflowError):
    """Retraction undefined at this ambient point (e.g. zero vector, singular matrix)."""


class OffManifoldPoint(SplineflowError):
    """A point violates the manifold constraint beyond the accepted tolerance."""


class NonTangentInput(SplineflowError):
    """A vector passed as tangent has a normal component beyond tolerance."""


class ConjugateConfiguration(SplineflowError):
    """Endpoints on or too close to each other's cut locus; geodesic not unique."""


# --- state / problem construction -------------------------------------------

class InfeasibleBoundaryData(SplineflowError):
    """Prescribed endpoint derivative data is not tangent at the endpoint."""


class OracleUnavailable(SplineflowError):
    """A closed-form reference solution was requested where none exists."""


class IndexOutOfRange(SplineflowError):
    """Arc/junction/derivative index outside the valid range."""


# --- discrete calculus -------------------------------------------------------

class GridTooCoarse(SplineflowError):
    """Grid has fewer nodes than the widest finite-difference stencil needs."""


class UnsupportedOrder(SplineflowError):
    """Requested order (spline order k, or monitor order mu) is not supported."""


# --- flow ---------------------------------------------------------------------

class StabilityBlowup(SplineflowError):
    """A state norm exceeded 1e6 times its initial value during time stepping."""


class RetractionFailure(SplineflowError):
    """Projection back to the manifold failed during a step."""


# --- linear theory -------------------------------------------------------------

class InvalidArity(SplineflowError):
    """Boundary-matrix assembly called with out-of-range (k, n, q)."""


class ZeroFrequency(SplineflowError):
    """The resolvent parameter p must be nonzero."""


class SingularSystem(SplineflowError):
    """A direct linear solve produced an unacceptably large residual."""
