"""Git-native version control for machine-learning model checkpoints.

Checkpoints are split into parameter groups. Git versions a small metadata
file while the group payloads (dense values or incremental updates) live in a
content-addressed object store beside the repository.
"""

from __future__ import annotations

from .errors import ThetaError
from .model import (
    Dtype,
    GroupMetadata,
    LshSignature,
    ModelMetadata,
    ModelSnapshot,
    ObjectPointer,
    Tensor,
    UpdateKind,
    decode_metadata,
    encode_metadata,
)
from .serializer import deserialize, serialize
from .store import ObjectStore

__version__ = "0.1.0"

__all__ = [
    "Dtype",
    "GroupMetadata",
    "LshSignature",
    "ModelMetadata",
    "ModelSnapshot",
    "ObjectPointer",
    "ObjectStore",
    "Tensor",
    "ThetaError",
    "UpdateKind",
    "decode_metadata",
    "deserialize",
    "encode_metadata",
    "serialize",
]
