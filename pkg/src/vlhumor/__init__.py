"""Two-branch video-language model for short-video humor classification.

The pipeline runs in stages: synthesize or ingest a corpus (`corpus`),
convert raw signals to fixed-shape model inputs (`signal_prep`), pre-train
the encoders contrastively on unlabeled samples (`augment`, `model`,
`objective`, `trainer`), fine-tune on labeled samples, and report metrics
and diagnostics (`eval_report`). `cli` exposes each stage as a subcommand.
"""

__version__ = "0.1.0"
