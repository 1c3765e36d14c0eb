"""capgov: runtime governance middleware for capability-invoking embodied agents.

The package separates agent cognition from execution oversight: every
capability invocation passes through admission control, policy checking,
monitored execution, recovery/rollback, and (when configured) human
override, with an append-only audit trace throughout.  A deterministic
simulation harness drives the whole stack over seeded trial streams and
reproduces the shipped experiment protocol.
"""

__version__ = "0.1.0"
