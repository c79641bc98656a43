import struct

import numpy as np
import pytest

from dnrBench.archive import FORMAT_VERSION, MAGIC, ModelArchive, load_model, save_model
from dnrBench.errors import CorruptionError, DataError, FormatError, VersionError
from dnrBench.kernel_svm import MulticlassSvm, decision_scores
from dnrBench.rejection import DnrModel, combined_scores, predict_with_reject
from dnrBench.tensor_nn import Network, forward_all


def test_network_round_trip(tmp_path, toy_net, toy_sets):
    path = save_model(toy_net, str(tmp_path / 'net.dnr'))
    archive = load_model(path)
    assert archive.kind == 'network' and archive.format_version == FORMAT_VERSION
    assert isinstance(archive.model, Network)
    x = toy_sets[1].features
    for a, b in zip(forward_all(toy_net, x), forward_all(archive.model, x)):
        assert np.array_equal(a, b)


def test_svm_round_trip(tmp_path, toy_model, toy_sets):
    svm = toy_model.combiner
    archive = load_model(save_model(svm, str(tmp_path / 'svm.dnr')))
    assert isinstance(archive.model, MulticlassSvm)
    z = np.random.default_rng(0).random((7, svm.dim))
    assert np.array_equal(decision_scores(archive.model, z), decision_scores(svm, z))


def test_dnr_round_trip(tmp_path, toy_model, toy_sets):
    archive = load_model(save_model(toy_model, str(tmp_path / 'dnr.dnr')))
    model = archive.model
    assert isinstance(model, DnrModel)
    assert model.theta == toy_model.theta
    assert model.taps.tap_indices == toy_model.taps.tap_indices
    x = toy_sets[1].features
    assert np.array_equal(combined_scores(model, x).s, combined_scores(toy_model, x).s)
    assert np.array_equal(predict_with_reject(model, x), predict_with_reject(toy_model, x))
    assert np.array_equal(model.ledger.train_mask, toy_model.ledger.train_mask)


@pytest.fixture
def saved(tmp_path, toy_model):
    path = tmp_path / 'model.dnr'
    save_model(toy_model.combiner, str(path))
    return path


def test_bad_magic(saved):
    saved.write_bytes(b'NOTADNR!' + saved.read_bytes()[8:])
    with pytest.raises(FormatError) as info:
        load_model(str(saved))
    assert info.value.path == str(saved)
    saved.write_bytes(b'xy')
    with pytest.raises(FormatError):
        load_model(str(saved))


def test_unknown_version_is_reported_before_the_checksum(saved):
    data = bytearray(saved.read_bytes())
    data[8:12] = struct.pack('>I', FORMAT_VERSION + 1)
    data[-1] ^= 0xFF
    saved.write_bytes(bytes(data))
    with pytest.raises(VersionError):
        load_model(str(saved))


@pytest.mark.parametrize('offset', [24, 60, -1])
def test_flipped_byte_is_corruption(saved, offset):
    data = bytearray(saved.read_bytes())
    data[offset] ^= 0x01
    saved.write_bytes(bytes(data))
    with pytest.raises(CorruptionError):
        load_model(str(saved))


@pytest.mark.parametrize('keep', [10, 40, -5])
def test_truncation_is_corruption(saved, keep):
    data = saved.read_bytes()
    saved.write_bytes(data[:keep])
    with pytest.raises(CorruptionError) as info:
        load_model(str(saved))
    assert isinstance(info.value, DataError)


def test_header_layout(saved):
    data = saved.read_bytes()
    magic, version, meta_len, payload_len, _ = struct.unpack('>8sIIQ32s', data[:56])
    assert magic == MAGIC and version == FORMAT_VERSION
    assert len(data) == 56 + meta_len + payload_len
    assert data[56:56 + meta_len].decode('utf-8').startswith('kind: multiclass_svm')


def test_unsupported_objects():
    with pytest.raises(TypeError):
        ModelArchive(np.zeros(3))
