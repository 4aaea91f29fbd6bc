"""Exception types raised across the laboratory."""


class LabError(Exception):
    pass


class ParameterError(LabError, ValueError):
    """Thrown when arguments fail a precondition or a stability guard"""
    pass


class DomainError(LabError, ValueError):
    """Thrown when a kernel is evaluated outside its domain (non-finite input)"""
    pass


class DivergenceError(LabError, ArithmeticError):
    """Thrown when a simulated state becomes non-finite.

    Carries the system label, the first offending particle and the step index
    so a stiff misconfiguration can be located.
    """

    def __init__(self, system: str, particle: int, step: int, beta: float = None):
        self.system = system
        self.particle = particle
        self.step = step
        self.beta = beta
        where = f"{system} system, particle {particle}, step {step}"
        if beta is not None:
            where += f", beta={beta:g}"
        super().__init__(f"non-finite state ({where})")


class ConditioningError(LabError, ArithmeticError):
    """Thrown when the step-noise factor cannot be built"""
    pass


class ContractError(LabError):
    """Thrown when path bundles violate a grid or pairing contract"""
    pass


class ConfigError(LabError):
    """Thrown for malformed config files.

    `field` is the dotted path of the offending entry, `line` the line number
    for syntax errors.
    """

    def __init__(self, message: str, field: str = None, line: int = None):
        self.field = field
        self.line = line
        prefix = ""
        if field:
            prefix = f"{field}: "
        if line is not None:
            prefix = f"line {line}: " + prefix
        super().__init__(prefix + message)
