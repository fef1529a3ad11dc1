"""Exception hierarchy shared by every module."""


class SegRecipesError(Exception):
    """Base class; ``kind`` is the machine-readable tag used by the CLI."""

    kind = "error"


class InvalidShapeError(SegRecipesError, ValueError):
    kind = "invalid_shape"


class NumericError(SegRecipesError, ArithmeticError):
    kind = "numeric"


class ConfigError(SegRecipesError, ValueError):
    kind = "config"


class EmptyDataError(SegRecipesError, ValueError):
    kind = "empty_data"


class EmptySelectionError(SegRecipesError, ValueError):
    kind = "empty_selection"


class UsageError(SegRecipesError, ValueError):
    kind = "usage"


class InvalidLabelError(SegRecipesError, ValueError):
    kind = "invalid_label"


class EmptyEvaluationError(SegRecipesError, ValueError):
    kind = "empty_evaluation"


class InvalidInputError(SegRecipesError, ValueError):
    kind = "invalid_input"


class CheckpointIncompatibleError(SegRecipesError, ValueError):
    kind = "checkpoint_incompatible"


class FormatError(SegRecipesError, ValueError):
    kind = "format"


class TrainingDivergedError(SegRecipesError, ArithmeticError):
    kind = "training_diverged"

    def __init__(self, iteration, value=None):
        self.iteration = iteration
        self.value = value
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
