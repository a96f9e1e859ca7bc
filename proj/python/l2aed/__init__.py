"""Few-shot learning with learned channel-wise aggregation."""

from ._l2aed import *  # noqa: F401,F403
from ._l2aed import __doc__  # noqa: F401
