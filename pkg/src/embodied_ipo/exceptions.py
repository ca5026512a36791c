"""Exception types raised across the package."""


class UnknownTaskType(ValueError):
    pass


class EpisodeAlreadyTerminated(RuntimeError):
    pass


class ParseError(ValueError):
    pass


class MissingActionMarker(ParseError):
    pass


class EmptyAction(ParseError):
    pass


class GrammarError(ValueError):
    """Action text that does not match the verb grammar or names an unknown entity."""

    def __init__(self, message, span=""):
        super().__init__(message)
        self.span = span


class ChoiceOutOfVocabulary(ValueError):
    pass


class DegenerateGroup(Warning):
    """All rewards in a group are equal, so the group-normalized advantage is undefined."""


class StaleBatch(RuntimeError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class SignalStarvation(RuntimeError):
    pass


class ReplayDivergence(RuntimeError):
    def __init__(self, turn, expected, actual):
        super().__init__(
            f"replay diverged at turn {turn}: logged {expected!r}, re-executed {actual!r}"
        )
        self.turn = turn
        self.expected = expected
        self.actual = actual
