"""Detection accuracy, compute accounting and report assembly.

Submodules are imported explicitly (``teevid.metrics.macs``,
``teevid.metrics.compute``, ``teevid.metrics.detection``,
``teevid.metrics.report``) so that model modules can depend on the MAC
primitives without an import cycle.
"""
