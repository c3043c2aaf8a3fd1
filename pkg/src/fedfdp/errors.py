"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Inconsistent model, run or schema configuration."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class FormatError(ValueError):
    """Malformed IDX input. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class InfeasibleBudgetError(ValueError):
    """The requested privacy budget is below what zero rounds already cost."""

    def __init__(self, budget: float, floor: float):
        super().__init__(
            f"infeasible: epsilon budget {budget:g} is below the accountant floor {floor:g}"
        )
        self.budget = budget
        self.floor = floor


class LambdaSolverError(RuntimeError):
    """Closed-form and numeric minimisers of P(lambda) disagree."""

    def __init__(self, message: str, closed_form: float, numeric: float):
        super().__init__(f"{message}: closed_form={closed_form!r}, numeric={numeric!r}")
        self.closed_form = closed_form
        self.numeric = numeric
