"""Long-tail mitigation toolkit for conversational recommendation.

Modules: ``corpus`` (ingestion, popularity, segmentation), ``embed``
(text and affect vectors), ``losses`` (CE, focal, ACFL), ``prototype``
(prototype selection and support sets), ``augment`` (generation pipeline),
``metrics`` (ranking and text metrics), ``trainer`` (synthetic experiments)
and ``cli``.
"""

__version__ = "0.1.0"
