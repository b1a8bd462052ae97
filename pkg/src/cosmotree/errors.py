"""Exception hierarchy shared across the package."""


class CosmotreeError(Exception):
    """Base class for all package errors."""


class CausalityError(CosmotreeError):
    """A causal precondition failed (point not in the timelike future, etc.)."""


class NotHyperbolicError(CosmotreeError):
    """Group element has no axis (elliptic, parabolic, or identity)."""


class LaminationError(CosmotreeError):
    """Lamination data rejected (components cross, or a component is not simple)."""


class DomainError(CosmotreeError):
    """Query point lies outside the spacetime domain."""


class SearchInconclusiveError(CosmotreeError):
    """A candidate search hit its resource cap before certifying an answer."""


class FlowError(CosmotreeError):
    """Numerical flow left the domain or failed to make progress."""


class ResourceLimitError(CosmotreeError):
    """Enumeration exceeded a configured cap."""


class SamplingError(CosmotreeError):
    """A sampled structure is too sparse for the query (e.g. the level-set
    neighbor graph is disconnected); increase the sampling density."""


class ConfigError(CosmotreeError):
    """Experiment configuration is malformed or inconsistent."""
