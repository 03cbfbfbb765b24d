"""schedlab: a desk-scale laboratory for learned class-curriculum scheduling.

A tiny autodiff core drives four trainable pieces: a mixture-prior state
codec, a grouped-channel key-feature distiller, a listwise ranking policy
with a fairness-weighted gradient, and a prototype segmentation learner
inside a synthetic two-domain world. The harness wires them into a
reproducible training loop with metrics, checkpoints, a CLI, and an HTTP
service.
"""

__version__ = "0.1.0"
