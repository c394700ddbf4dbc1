"""Lane detection network built from explicit numpy primitives.

Encoder with downsampler / Non-bottleneck-1D / feature-merge /
information-exchange blocks, a segmentation decoder and a lane-existence
decoder, trained with SGD and scored with the CULane-style 30-pixel IOU/F1
protocol. Every layer ships an explicit backward pass verified against
central finite differences.
"""

__version__ = "0.1.0"
