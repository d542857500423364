"""Teacher-student domain adaptation for attention encoder-decoder models.

Desk-scale: a numpy-backed autodiff core, a GRU encoder-decoder with
additive attention, the full family of teacher-student transfer objectives,
a synthetic parallel-domain corpus, and an experiment grid that compares the
methods under identical conditions.
"""

import os

# Single-threaded BLAS keeps runs bit-reproducible and avoids oversubscription
# when grid cells run as parallel processes. Must be set before numpy loads;
# no effect if the process already imported numpy.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
