"""PID-factorized, vector-quantized multimodal volume synthesis with an
edge-conditioned Half-UNet decoder, plus evaluation and attribution tools."""
from . import edges, errors, evalkit, losses, ndgrad, net, phantom, pid, shapley, vq

__version__ = "0.1.0"
