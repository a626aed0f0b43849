"""Online test-time adaptation for streaming blood pressure regression.

The compiled core exposes the signal tooling (tokenization, normalization,
synthetic streams, CSV ingest), the dual-head model with exact gradients,
the dual-queue buffer, the per-subject adaptation loop, and the evaluation
sweep. See the project README for the file formats and the CLI.
"""

from ottabp._core import *  # noqa: F401,F403
from ottabp._core import __version__  # noqa: F401
