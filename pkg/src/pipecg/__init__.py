"""Classic, pipelined and deep-pipelined conjugate gradients with
rounding-error gap diagnostics."""

__version__ = "0.1.0"
