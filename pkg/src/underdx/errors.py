"""Exception types shared across the package.

Every error carries a short machine-readable ``code`` that the CLI prints
on a single line alongside the human message.
"""


class UnderdxError(Exception):
    code = "error"


class DimensionError(UnderdxError):
    """A vector does not match the layout a parameter set expects."""

    code = "dimension-mismatch"


class DataError(UnderdxError):
    """A cohort or record violates its structural invariants."""

    code = "data-invalid"


class ConfigError(UnderdxError):
    code = "config-invalid"


class ImpossibleObservationError(UnderdxError):
    """An observed test result has probability zero under the model."""

    code = "impossible-observation"

    def __init__(self, individual_id, t, result):
        self.individual_id = individual_id
        self.t = t
        self.result = result
        super().__init__(
            f"result r={result} at t={t} for individual {individual_id} "
            "has probability below 1e-300 under the model"
        )


class FitError(UnderdxError):
    code = "fit-failed"


class SeparationError(UnderdxError):
    """Logistic fit diverged, indicating (quasi-)separated outcomes."""

    code = "perfect-separation"


class RankDeficiencyError(UnderdxError):
    code = "rank-deficient"

    def __init__(self, column):
        self.column = column
        super().__init__(f"design column {column!r} is linearly dependent on earlier columns")


class RecalibrationError(UnderdxError):
    code = "recalibration-degenerate"


class MetricError(UnderdxError):
    code = "metric-undefined"
