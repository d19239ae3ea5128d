"""Exception taxonomy shared across the simulator."""


class SimError(Exception):
    """Base class for all simulator errors."""


# --- clock / network ---------------------------------------------------------

class UnknownParticipant(SimError):
    pass


class AlreadyDelivered(SimError):
    pass


class InfiniteDelayWithoutFault(SimError):
    """Unbounded deferral requested for an envelope not covered by a crash/block fault."""


# --- ledger -------------------------------------------------------------------

class DuplicateAsset(SimError):
    pass


class NotFound(SimError):
    pass


# --- trusted-entity protocol aborts ------------------------------------------

class StaleSid(SimError):
    pass


class PastDeadline(SimError):
    pass


class NotOwner(SimError):
    pass


class AssetLocked(SimError):
    pass


class MonotonicityViolation(SimError):
    """New backup release does not precede the current one by the required gap."""


class SelfPay(SimError):
    pass


class NoPayInfo(SimError):
    pass


class BadHandoffSig(SimError):
    pass


class NoSwapProc(SimError):
    pass


class MarginViolation(SimError):
    """Swap responder's release time does not exceed the initiator's by more than 2*delta."""


class NoSwapOpti(SimError):
    pass


class NoSwapOk(SimError):
    pass


# --- crypto -------------------------------------------------------------------

class DecryptFailure(SimError):
    pass


class ThresholdConfigError(SimError):
    """Group parameters violate t > 2n/3."""


# --- user agent ---------------------------------------------------------------

class NotYetSolved(SimError):
    pass


class BeforeRelease(SimError):
    pass


# --- ideal model / harness ----------------------------------------------------

class HookOrderError(SimError):
    """An ideal-world schedule violates the step ordering constraints."""


class MappingGap(SimError):
    """A protocol trace event has no ideal-world counterpart."""


class ScenarioInvalid(SimError):
    """Scenario file failed validation; message carries field diagnostics."""
