"""gridwms: a desk-scale grid workload management system.

Jobs are described as classads, validated at a network gateway, brokered
onto simulated compute elements, executed through a two-phase-commit
staging queue, and tracked in an event-sourced bookkeeping store that is
the single source of job truth.  Components communicate exclusively via
crash-safe filesystem queues so that any of them can be killed and
restarted without losing jobs.
"""

__version__ = "0.1.0"
