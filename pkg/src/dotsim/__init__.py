"""Deterministic round-based simulator for delegated-custody transfer protocols.

A library plus CLI that models temporary on-chain accounts whose keys are
delegated to a trusted entity (a logical enclave or a threshold-crypto node
group), off-chain ownership handoffs and atomic swaps between them, and the
unilateral on-chain recovery path that keeps users whole when the trusted
entity fails.  Everything runs on a single-threaded round clock so that runs
are exactly reproducible from (scenario, seed, fault list).
"""

__version__ = "0.1.0"
