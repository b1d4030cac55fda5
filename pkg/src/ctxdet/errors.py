"""Exception hierarchy shared by all modules.

Exit-code mapping used by the CLI: ConfigError/ParseError -> 2,
ContractError (and subclasses) -> 3.
"""


class ContractError(RuntimeError):
    """A runtime contract was violated (bad call ordering, non-finite values, ...)."""


class ShapeError(ContractError):
    """Operands have incompatible shapes; message carries both shapes."""


class OracleError(ContractError):
    """A verification oracle could not run (e.g. non-deterministic objective)."""


class ConfigError(ValueError):
    """Invalid configuration value supplied by the caller or the CLI."""


class ParseError(ValueError):
    """Malformed input document (dataset annotations, checkpoints, ...)."""
