"""Emotion recognition from heavily downsampled, compressed face video.

Submodules: ``nn`` (numpy network engine), ``imageops`` (resampling),
``codec`` (block-DCT codec surrogate), ``models`` (SR-FCN and the valence
CNN), ``training``, ``metrics``, ``data`` and ``harness`` (experiment driver,
also reachable through the ``lowbit-emotion`` command).
"""

__version__ = "0.1.0"
