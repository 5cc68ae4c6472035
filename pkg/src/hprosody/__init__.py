"""Hierarchical token-level prosody modeling toolkit.

Modules: :mod:`dsp` (STFT, mel, F0), :mod:`labels` (alignments, rule-based
labels, quantizers), :mod:`nn` (numpy layers and Adam), :mod:`vq`
(reference encoder and codebook), :mod:`predictor` (word/phoneme/hierarchical
predictors), :mod:`metrics` (DTW, GPE, VDE, FFE, F-MAE, E-MAE) and :mod:`cli`.
"""
__version__ = "0.1.0"
