"""Exception hierarchy shared across the toolkit.

The CLI maps these onto its exit-code contract: I/O problems exit 1,
parse/validation/fit problems exit 2, infeasibility exits 3.
"""


class HetserveError(Exception):
    """Base class for all toolkit errors."""


class SpecError(HetserveError):
    """A cluster spec, scenario, or config document is malformed or violates
    a field invariant. The message names the offending field or position."""


class TraceError(HetserveError):
    """A trace file is malformed; the message carries the 1-based line number."""


class FitError(HetserveError):
    """Latency-model fitting failed."""


class RankDeficientError(FitError):
    """The profiling design matrix cannot identify all coefficients.

    ``dimension`` names the degenerate axis (e.g. "batch_size") when one
    can be singled out.
    """

    def __init__(self, message: str, dimension: str | None = None):
        super().__init__(message)
        self.dimension = dimension


class InfeasibleError(HetserveError):
    """A configuration or request cannot satisfy the memory constraint."""


class InfeasibleRequestError(InfeasibleError):
    """A single request can never fit an instance's KV budget."""

    def __init__(self, message: str, request_id: str):
        super().__init__(message)
        self.request_id = request_id


class InfeasibleConfigError(InfeasibleError):
    """A deployment configuration fails the per-instance memory constraint.

    ``slack_bytes`` is budget minus required bytes (negative when infeasible).
    """

    def __init__(self, message: str, machine: str, slack_bytes: float):
        super().__init__(message)
        self.machine = machine
        self.slack_bytes = slack_bytes


class SchedulingError(HetserveError):
    """Invalid scheduler operation (unknown completion id, empty instance set, ...)."""
