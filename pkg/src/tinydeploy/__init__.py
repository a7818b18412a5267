"""tinydeploy: a deployment compiler for pre-quantized DNN graphs targeting
a configurable virtual heterogeneous microcontroller."""

__version__ = "0.1.0"
