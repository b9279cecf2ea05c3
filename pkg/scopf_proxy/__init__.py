"""Self-supervised SC-DCOPF proxy: a DC-OPF with GNN-tuned line limits."""

__version__ = "0.1.0"
