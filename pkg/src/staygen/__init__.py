"""staygen: tokenized stay-trajectory synthesis and evaluation."""

import os

# On small machines oversubscribed BLAS threads fight the hand-written
# kernels; single-threaded BLAS is both faster and bit-reproducible.
# Must be set before numpy first loads to take effect.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

__version__ = "0.1.0"
