"""Exception hierarchy shared by all modules."""


class PdnRelError(Exception):
    """Base class. ``code`` is a short machine-parsable tag used by the CLI."""

    code = "E_PDNREL"


class ValidationError(PdnRelError, ValueError):
    """Bad input: malformed file, violated invariant, inconsistent arguments."""

    code = "E_VALIDATION"


class ParseError(ValidationError):
    code = "E_PARSE"

    def __init__(self, message, path=None, line=None, field=None):
        ctx = []
        if path is not None:
            ctx.append(str(path))
        if line is not None:
            ctx.append(f"line {line}")
        if field is not None:
            ctx.append(f"field '{field}'")
        prefix = ":".join(ctx)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.field = field


class NumericalError(PdnRelError, ArithmeticError):
    code = "E_NUMERICAL"


class ConvergenceError(NumericalError):
    """Iterative solver did not reach tolerance; carries the final residual."""

    code = "E_CONVERGENCE"

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(f"{message} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations
