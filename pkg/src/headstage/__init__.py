"""Adaptive per-electrode sampling for spike-detecting neural headstages.

Modules
-------
signal_core   traces, resampling, band-pass conditioning, threshold detection
acquisition   ADC clock plan, downsampling factors, round gating
predictor     simulated training data and the detection-error MLP
optimizer     per-electrode (rate, threshold) search under an error budget
baselines     block DCT and compressive-sensing comparators
evaluation    ground truth, matching, metrics and scheme comparison
telemetry     packet codecs and the calibrate/stream session driver
cli           command-line entry point
"""

__version__ = "0.1.0"
