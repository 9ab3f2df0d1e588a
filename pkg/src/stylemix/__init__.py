"""stylemix: sparse mixture of routed style experts, desk scale.

A self-contained numerical core (tape-based reverse-mode autodiff),
noisy top-k gating with sparse expert dispatch, hierarchical style
encoders, a synthetic one-to-many benchmark, joint training, and
expert-utilization analysis, wired together by a CLI.
"""

__version__ = "0.1.0"
