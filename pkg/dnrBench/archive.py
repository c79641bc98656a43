"""
This is a script for persisting trained models.

Container layout (all integers big-endian):

    offset  size  field
    0       8     magic b"DNRBENCH"
    8       4     format version (uint32)
    12      4     meta length M (uint32)
    16      8     payload length P (uint64)
    24      32    sha256 of meta + payload
    56      M     meta, UTF-8 YAML (model kind, shapes, hyperparameters)
    56+M    P     payload, numpy .npz of little-endian float64/int64 arrays

Every real-valued parameter lives in the payload, so a round trip is
bit-exact.
"""
import hashlib
import io
import struct

import numpy as np
import yaml

from .errors import CorruptionError, FormatError, VersionError
from .kernel_svm import MulticlassSvm
from .rejection import DnrModel
from .tensor_nn import Network

MAGIC = b'DNRBENCH'
FORMAT_VERSION = 1
_HEADER = struct.Struct('>8sIIQ32s')

_KINDS = {'network': Network, 'multiclass_svm': MulticlassSvm, 'dnr_model': DnrModel}


class ModelArchive:
    """A model together with its container version.

    Attributes:
        model: Network, MulticlassSvm or DnrModel.
        kind (str): registry name of the model class.
        format_version (int): container version.
    """

    def __init__(self, model, format_version=FORMAT_VERSION):
        for kind, cls in _KINDS.items():
            if isinstance(model, cls):
                self.kind = kind
                break
        else:
            raise TypeError("cannot archive objects of type {}".format(type(model).__name__))
        self.model = model
        self.format_version = format_version


def _little_endian(value):
    value = np.asarray(value)
    if value.dtype.kind == 'f':
        return np.ascontiguousarray(value, dtype='<f8')
    if value.dtype.kind in 'iub':
        return np.ascontiguousarray(value, dtype='<i8')
    raise TypeError("unsupported array dtype {}".format(value.dtype))


def _encode(archive):
    meta, arrays = archive.model.to_state()
    meta = {'kind': archive.kind, 'state': meta}
    meta_bytes = yaml.safe_dump(meta, sort_keys=True).encode('utf-8')
    buffer = io.BytesIO()
    np.savez(buffer, **{name: _little_endian(value) for name, value in sorted(arrays.items())})
    payload = buffer.getvalue()
    digest = hashlib.sha256(meta_bytes + payload).digest()
    header = _HEADER.pack(MAGIC, archive.format_version, len(meta_bytes), len(payload), digest)
    return header + meta_bytes + payload


def save_model(model, path):
    """Write a model (or ModelArchive) to path.

    Args:
        model (ModelArchive or Network or MulticlassSvm or DnrModel): what to save.
        path (str): destination file.
    """
    archive = model if isinstance(model, ModelArchive) else ModelArchive(model)
    data = _encode(archive)
    with open(path, 'wb') as f:
        f.write(data)
    return path


def load_model(path):
    """Read a ModelArchive written by save_model.

    Raises:
        FormatError: not a model archive.
        VersionError: unsupported format version.
        CorruptionError: truncated file or checksum mismatch.
    """
    with open(path, 'rb') as f:
        data = f.read()
    if len(data) < 12:
        if MAGIC.startswith(data[:8]):
            raise CorruptionError("{}: archive truncated inside its header".format(path))
        raise FormatError("{}: not a model archive".format(path), path=path)
    if data[:8] != MAGIC:
        raise FormatError("{}: not a model archive".format(path), path=path)
    version = struct.unpack('>I', data[8:12])[0]
    if version != FORMAT_VERSION:
        raise VersionError("{}: archive format version {} is not supported (expected {})"
                           .format(path, version, FORMAT_VERSION))
    if len(data) < _HEADER.size:
        raise CorruptionError("{}: archive truncated inside its header".format(path))
    _, _, meta_len, payload_len, digest = _HEADER.unpack(data[:_HEADER.size])
    body = data[_HEADER.size:]
    if len(body) != meta_len + payload_len:
        raise CorruptionError("{}: archive body has {} bytes, header announces {}"
                              .format(path, len(body), meta_len + payload_len))
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError("{}: archive checksum mismatch".format(path))
    meta = yaml.safe_load(body[:meta_len].decode('utf-8'))
    with np.load(io.BytesIO(body[meta_len:]), allow_pickle=False) as npz:
        arrays = {name: npz[name] for name in npz.files}
    cls = _KINDS.get(meta.get('kind'))
    if cls is None:
        raise FormatError("{}: unknown model kind {!r}".format(path, meta.get('kind')), path=path)
    return ModelArchive(cls.from_state(meta['state'], arrays), version)
