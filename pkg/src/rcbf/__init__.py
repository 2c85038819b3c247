"""rcbf: realtime-capable beamforming for encoded-aperture row-column ultrasound.

Library layout mirrors the processing pipeline: ``model`` holds shared
types, ``sigproc`` demodulates/filters, ``decode`` undoes Hadamard
aperture encodings, ``das`` reconstructs images, ``simulator`` provides
the forward oracle, ``pipeline`` orchestrates staged realtime processing,
``io`` owns file formats and display transforms, ``service`` streams to
viewers and ``cli`` wraps it all for the command line.
"""

from .model import (
    AcquisitionDescriptor,
    AcquisitionMode,
    ArrayGeometry,
    BeamformParams,
    ElementTransmit,
    FilterKind,
    FilterSpec,
    ImageFrame,
    Interpolation,
    PlaneTransmit,
    RfFrame,
    SampleFormat,
    TransmitModel,
    VirtualSourceTransmit,
    grid_index_to_point,
    validate_descriptor,
)

__all__ = [
    "AcquisitionDescriptor",
    "AcquisitionMode",
    "ArrayGeometry",
    "BeamformParams",
    "ElementTransmit",
    "FilterKind",
    "FilterSpec",
    "ImageFrame",
    "Interpolation",
    "PlaneTransmit",
    "RfFrame",
    "SampleFormat",
    "TransmitModel",
    "VirtualSourceTransmit",
    "grid_index_to_point",
    "validate_descriptor",
]

__version__ = "0.1.0"
