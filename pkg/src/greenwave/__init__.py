"""greenwave: queue-model traffic signal control with sequence policies.

Subpackages are imported lazily by users; nothing heavy happens here.
"""

__version__ = "0.1.0"
