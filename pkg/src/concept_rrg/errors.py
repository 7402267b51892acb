"""Exception hierarchy.

Each error carries a ``category`` used by the command line front end to
print a categorized message (config, data, numerical, I/O).
"""


class PipelineError(Exception):
    category = "runtime"


class ConfigError(PipelineError, ValueError):
    category = "config"


class ShapeError(ConfigError):
    category = "config"


class DataError(PipelineError, ValueError):
    category = "data"


class ParseError(DataError):
    """A report sentence matched no grammar template."""

    def __init__(self, sentence_index: int, sentence: str):
        self.sentence_index = sentence_index
        self.sentence = sentence
        super().__init__(f"sentence {sentence_index} matches no template: {sentence!r}")


class NumericalDomainError(PipelineError, ArithmeticError):
    category = "numerical"
