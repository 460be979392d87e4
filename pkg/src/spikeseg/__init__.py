"""Spiking-neuron sequence segmentation toolkit.

Heterogeneous integrate-and-fire neuron dynamics, continuous boundary
detection over encoder states, a small reverse-mode autodiff engine with a
surrogate spike gradient, and a toy spiking transformer trained on synthetic
segmentation corpora.
"""

__version__ = "0.1.0"
