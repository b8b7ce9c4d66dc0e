class ToolkitError(Exception):
    """Base class for every error raised by this toolkit."""


class ValidationError(ToolkitError, ValueError):
    """Bad input: config, plan, dimensions, unknown ids, empty data."""


class CorpusFormatError(ToolkitError):
    """A record, manifest or checkpoint file could not be decoded."""


class UndefinedMetricError(ToolkitError):
    """The metric has no value for this input (as opposed to a numeric result)."""


class TrainingDivergedError(ToolkitError):
    def __init__(self, epoch: int, detail: str = 'loss is not finite'):
        super().__init__(f'training diverged at epoch {epoch}: {detail}')
        self.epoch = epoch


class HarnessError(ToolkitError):
    """A stage of an experiment plan failed at runtime."""
