"""Decision-focused learning for restless multi-armed bandits.

Submodules: ``core`` (types, validation, I/O), ``whittle`` (index solver),
``whittle_diff`` (index Jacobians), ``softtopk``, ``evaluation`` (policies
and off-policy estimators), ``predictor``, ``training``, ``belief``
(collapsing bandits), ``datagen`` and ``cli``.
"""

__version__ = "0.1.0"
