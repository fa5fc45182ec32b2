"""Descriptive speech-text alignment at desk scale.

Pipeline stages live in their own modules: ``metadata`` (manifests),
``seed`` (seed transcripts), ``generation`` (LLM targets), ``corpus``
(balancing and stats), ``adapter`` and ``training`` (the trainable
bridge) and ``evaluation`` (benchmark scoring).
"""
__version__ = "0.1.0"
