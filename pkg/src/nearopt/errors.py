class NearOptError(Exception):
    """Base class for all errors raised by nearopt."""


class InvalidModelError(NearOptError):
    def __init__(self, coefficient, t, value):
        self.coefficient = coefficient
        self.t = t
        self.value = value
        super().__init__(f"coefficient {coefficient!r} is not finite at t={t}: {value}")


class DomainError(NearOptError, ValueError):
    pass


class IncompatibleError(NearOptError, ValueError):
    pass


class DivergenceError(NearOptError):
    def __init__(self, step):
        self.step = step
        super().__init__(f"forward state became non-finite at step {step}")


class UnsupportedControlError(NearOptError):
    pass


class UnsupportedSolverError(NearOptError):
    pass


class IllConditionedBasisError(NearOptError):
    def __init__(self, step, reason):
        self.step = step
        super().__init__(f"regression basis is ill-conditioned at step {step}: {reason}")


class HypothesisViolatedError(NearOptError):
    def __init__(self, probe, detail):
        self.probe = probe
        self.detail = detail
        super().__init__(f"hypothesis {probe} violated: {detail}")


class ModelFileError(NearOptError):
    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
