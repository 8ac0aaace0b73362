"""Simulator for a spin-ensemble microwave memory: NV centres in a 3D resonator.

Modules: ``ensemble`` (spin bins), ``spectroscopy`` (S11 and fits), ``dynamics``
(Maxwell-Bloch integration), ``decoherence`` (bath models), ``pumping`` (optical reset),
``experiments`` (echo pipelines) and ``cli_io`` (configuration, output, command line).
"""

__version__ = "0.1.0"
