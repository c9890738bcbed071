"""Uncertainty quantification for gridded traffic forecasts.

Submodules: ``tensor`` and ``io`` (data layout and file format), ``synth``
(synthetic cities), ``predictor`` (reference models and training),
``estimators`` (sampling-based uncertainty), ``conformal``, ``metrics``,
``outlier`` and ``cli``.  They are not imported here so that the command
line can set thread limits before numpy loads.
"""

__version__ = "0.1.0"
