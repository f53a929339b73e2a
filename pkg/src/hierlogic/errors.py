"""Exception types raised across the package."""


class HierLogicError(Exception):
    """Base class for all package errors."""


class UnknownPredicate(HierLogicError, KeyError):
    pass


class UnknownEntity(HierLogicError, KeyError):
    pass


class ArityMismatch(HierLogicError, ValueError):
    pass


class EmptyKB(HierLogicError, ValueError):
    pass


class InvalidSize(HierLogicError, ValueError):
    pass


class NoNegatives(HierLogicError, ValueError):
    pass


class NotEnoughNegatives(HierLogicError, ValueError):
    pass


class IndexOutOfRange(HierLogicError, IndexError):
    pass


class ShapeMismatch(HierLogicError, ValueError):
    pass


class HeadDivisibility(HierLogicError, ValueError):
    pass


class NonScalarLoss(HierLogicError, ValueError):
    pass


class NonFiniteError(HierLogicError, FloatingPointError):
    pass


class EmptyBatch(HierLogicError, ValueError):
    pass


class EmptyInput(HierLogicError, ValueError):
    pass


class Divergence(HierLogicError, FloatingPointError):
    pass


class NoTargets(HierLogicError, ValueError):
    pass


class DigestMismatch(HierLogicError, ValueError):
    pass


class IoFailure(HierLogicError, OSError):
    pass


class NotHardened(HierLogicError, ValueError):
    pass


class NotEncodable(HierLogicError, ValueError):
    pass


class KbTooLarge(HierLogicError, ValueError):
    pass


class NoRules(HierLogicError, ValueError):
    pass


class RuleSyntaxError(HierLogicError, ValueError):
    pass


class FlagConflict(HierLogicError, ValueError):
    pass
