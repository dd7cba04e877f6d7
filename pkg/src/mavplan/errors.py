"""Exception types shared across the package."""


class IllegalMove(ValueError):
    def __init__(self, action, reason="not a legal action"):
        super().__init__(f"illegal move {action!r}: {reason}")
        self.action = action


class ParseError(ValueError):
    """Text that does not conform to one of the frozen grammars.

    ``category`` is machine readable; for oracle responses it is one of
    ``bad_state``, ``bad_move_list``, ``bad_token``, ``truncated`` or
    ``duplicate_action``.
    """

    def __init__(self, message, offset=0, category="bad_state", path=None):
        where = f" at byte {offset}" if path is None else f" at node {path}"
        super().__init__(f"{category}: {message}{where}")
        self.category = category
        self.offset = offset
        self.path = path


class SolverBudgetExceeded(RuntimeError):
    pass


class ContractViolation(RuntimeError):
    """A caller broke an operation's precondition."""
