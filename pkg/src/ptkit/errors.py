"""Exception hierarchy for ptkit.

Every error raised by the toolkit derives from :class:`ToolkitError` so that
callers (in particular the CLI) can distinguish tool failures from bugs.
"""

from __future__ import annotations


class ToolkitError(Exception):
    """Base class for all ptkit errors."""


class InvalidDomain(ToolkitError):
    """A model-domain description violates its invariants."""


class ResolutionTooCoarse(ToolkitError):
    """Requested grid resolution is below the supported minimum."""


class LevelOutOfRange(ToolkitError):
    """A level value lies outside the range of the exhaustion field."""


class DegenerateGradient(ToolkitError):
    """|grad h| falls below tolerance on a positive-measure set."""


class NoCatalogEntry(ToolkitError):
    """(domain, p) pair is not covered by the closed-form catalog."""


class IndeterminateTail(ToolkitError):
    """Neither divergence nor convergence of a radial integral could be
    certified within the iteration budget."""


class NonConvergence(ToolkitError):
    """Iterative solver exhausted its budget without reaching tolerance."""


class UnverifiedExhaustion(ToolkitError):
    """Capacity formula invoked with an exhaustion function that failed its
    defining-condition verdicts (the result would only be an upper bound)."""


class SupportTouchesBoundary(ToolkitError):
    """A compactly-supported test field is nonzero near boundary/cut nodes."""


class ZeroDenominator(ToolkitError):
    """The pairing integral in a ratio vanished; the ratio is undefined."""


class AllDenominatorsZero(ToolkitError):
    """Every member of a test-field family had a vanishing pairing."""


class EmptyFamily(ToolkitError):
    """A nonempty test-field or partition family was required."""


class WindowTooShort(ToolkitError):
    """The sampled level window has too few samples for a verdict."""


class BoundaryConditionViolated(ToolkitError):
    """Boundary trace/flux quadrature exceeds tolerance; verdicts withheld."""


class DisjointnessViolated(ToolkitError):
    """Members of a tract family overlap."""


class NoCurvePayload(ToolkitError):
    """A report without curve data was passed to the curve emitter."""


class ConfigInvalid(ToolkitError):
    """A run configuration failed validation.

    Carries the offending field name so the CLI can point at it.
    """

    def __init__(self, field: str, reason: str):
        self.field = field
        self.reason = reason
        super().__init__(f"config field '{field}': {reason}")
