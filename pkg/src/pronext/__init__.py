"""pronext: hierarchical focal/context recognition at desk scale.

Subpackages and modules:
  autodiff    minimal reverse-mode tensor engine and kernels
  gradcheck   finite-difference gradient verification
  parsers     coordinate-field patch parser and ablation baselines
  gaze        one hierarchical focal/context stage
  model       full 3-stage model, variants, FLOP estimator
  train       augmentation, MixUp, AdamW, training loop
  checkpoint  binary checkpoint format
  data        procedural synthetic datasets
  explain     mask-based localization/segmentation and metrics
  cli         command-line harness
"""

__version__ = "0.1.0"
