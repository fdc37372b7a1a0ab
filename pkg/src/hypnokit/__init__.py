"""hypnokit: automatic sleep staging from polysomnography.

Modules: ``psg_io`` (EDF and CSV side-cars), ``preprocess`` (conditioning
and record rejection), ``net`` (autodiff core, stager, training),
``confidence`` (hypnodensity analytics), ``metrics`` (agreement and sleep
architecture), ``stats`` (permutation tests, mixed model), ``synth``
(synthetic PSG) and ``cli``.
"""

__version__ = "0.1.0"
