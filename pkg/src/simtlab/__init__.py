"""Simultaneous translation with self-modifying prefix training, at desk scale.

A small numpy autodiff engine drives a transformer trained to predict from
source prefixes, a confidence head that decides when to write, and the
evaluation tools (latency, alignment satisfaction, BLEU) to compare it with
fixed wait-k schedules.
"""

__version__ = "0.1.0"
