"""Exception types.

Every error carries a short machine-readable ``code`` matching the failure
names used throughout the package (``"model-singularity"``,
``"subspace-violation"`` and so on), so callers and the CLI can branch on
the kind of failure without parsing messages.
"""


class GSureError(Exception):
    code = "gsure-error"

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class ModelSingularityError(GSureError):
    code = "model-singularity"


class SubspaceViolationError(GSureError):
    code = "subspace-violation"


class FullRankModelError(GSureError):
    code = "full-rank-model"


class NondifferentiablePointError(GSureError):
    code = "nondifferentiable-point"


class DimensionError(GSureError, ValueError):
    code = "dimension-mismatch"


class DegenerateRegularizationError(GSureError):
    code = "degenerate-regularization"


class GCVDegenerateError(GSureError):
    code = "gcv-degenerate"


class DiscrepancyUnbracketedError(GSureError):
    """No sign change of the discrepancy function on the grid.

    ``result`` holds the selection at the grid endpoint closest to the
    target residual, so callers may fall back to it.
    """

    code = "discrepancy-unbracketed"

    def __init__(self, message, result=None, **details):
        super().__init__(message, **details)
        self.result = result


class ProbeFailureError(GSureError):
    code = "probe-failure"


class NonConvergedError(GSureError):
    code = "non-converged"


class WaveletLengthError(GSureError, ValueError):
    code = "length-error"


class UnknownProblemError(GSureError, KeyError):
    code = "unknown-problem"


class ImageFormatError(GSureError, ValueError):
    code = "image-format"


class ConfigError(GSureError, ValueError):
    code = "config-error"


class SchemaMismatchError(GSureError, ValueError):
    code = "schema-mismatch"
