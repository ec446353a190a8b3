import numpy as np
import pytest

from core.libs.exceptions import EngineError, ErrorCode
from core.training.corpus import synthesize_corpus
from core.training.data import PAD, encode_bytes, encode_text, ingest_corpus


def test_two_byte_window():
    dataset = encode_text('ab', 2)

    assert dataset.inputs.tolist() == [[ord('a'), ord('b')]]
    assert dataset.targets.tolist() == [[ord('b'), PAD]]


def test_windows_do_not_overlap_and_drop_the_partial_tail():
    dataset = encode_text('abcde', 2)

    assert dataset.inputs.tolist() == [[97, 98], [99, 100]]
    assert dataset.targets.tolist() == [[98, 99], [100, 101]]


def test_corpus_shorter_than_a_window():
    with pytest.raises(EngineError) as err:
        encode_text('abc', 8)

    assert err.value.error_code == ErrorCode.DATA


def test_empty_corpus_file(tmp_path):
    path = tmp_path / 'corpus.txt'
    path.write_bytes(b'')

    with pytest.raises(EngineError) as err:
        ingest_corpus(str(path), 4)

    assert err.value.error_code == ErrorCode.DATA


def test_missing_corpus_file(tmp_path):
    with pytest.raises(EngineError) as err:
        ingest_corpus(str(tmp_path / 'absent.txt'), 4)

    assert err.value.error_code == ErrorCode.NOT_FOUND


def test_ingest_caps_windows(tmp_path):
    path = tmp_path / 'corpus.txt'
    path.write_text('x' * 100)

    assert len(ingest_corpus(str(path), 4)) == 25
    assert len(ingest_corpus(str(path), 4, max_windows=10)) == 10


def test_same_seed_same_batch_order(toy_dataset):
    first = [inputs.tolist() for inputs, _ in toy_dataset.stream(4, 10, seed=3)]
    second = [inputs.tolist() for inputs, _ in toy_dataset.stream(4, 10, seed=3)]
    other = [inputs.tolist() for inputs, _ in toy_dataset.stream(4, 10, seed=4)]

    assert len(first) == 10
    assert first == second
    assert first != other


def test_stream_crosses_epochs():
    dataset = encode_text('abcdefgh', 2)

    batches = list(dataset.stream(3, 5))

    assert [b[0].shape[0] for b in batches] == [3, 1, 3, 1, 3]


def test_split_is_disjoint():
    dataset = encode_bytes(np.arange(240), 8)

    train, val = dataset.split(0.1, seed=0)

    assert (len(train), len(val)) == (27, 3)
    starts = set(train.inputs[:, 0].tolist()) | set(val.inputs[:, 0].tolist())
    assert len(starts) == 30


def test_split_keeps_one_validation_window():
    train, val = encode_text('abcdef', 2).split(0.01)

    assert (len(train), len(val)) == (2, 1)


def test_synthetic_corpus_is_deterministic():
    assert synthesize_corpus(20, seed=1) == synthesize_corpus(20, seed=1)
    assert synthesize_corpus(20, seed=1) != synthesize_corpus(20, seed=2)
    assert len(synthesize_corpus(20, seed=1).splitlines()) == 20
    assert np.all(np.frombuffer(synthesize_corpus(5).encode('utf-8'), dtype=np.uint8) < 128)
