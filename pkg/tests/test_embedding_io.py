import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swrisk.embedding_io import (assemble_dataset, chunk_spans, load_labels, load_manifest,
                                 parse_swem, pool_rows, read_swem, swem_bytes, write_labels,
                                 write_swem)
from swrisk.errors import DomainError, DuplicateError, FormatError, SchemaError, TruncationError
from swrisk.wavio import to_pcm16, write_wav


def spans(*args):
    return [(s.start_s, s.end_s) for s in chunk_spans(*args)]


# -- chunking -----------------------------------------------------------------

@pytest.mark.parametrize("args,expected", [
    ((25, 10, 0), [(0, 10), (10, 20), (20, 25)]),
    ((20, 10, 0.5), [(0, 10), (5, 15), (10, 20)]),
    ((3.2, 1, 0), [(0, 1), (1, 2), (2, 3.2)]),
    ((0.3, 1, 0), [(0, 0.3)]),
])
def test_chunk_span_examples(args, expected):
    assert spans(*args) == expected


@pytest.mark.parametrize("args", [(0, 1, 0), (5, 0, 0), (-1, 1, 0), (5, 1, 1.0)])
def test_chunk_span_domain_errors(args):
    with pytest.raises(DomainError):
        chunk_spans(*args)


@settings(max_examples=200)
@given(st.floats(0.01, 200.0), st.floats(0.1, 30.0), st.floats(0.0, 0.9))
def test_chunk_span_properties(duration, chunk, overlap):
    out = chunk_spans(duration, chunk, overlap)
    hop = chunk * (1 - overlap)
    starts = [s.start_s for s in out]
    assert starts == sorted(starts)
    for a, b in zip(starts, starts[1:]):
        assert math.isclose(b - a, hop, rel_tol=1e-9, abs_tol=1e-9)
    assert max(s.end_s for s in out) == duration
    assert all(0 <= s.start_s < s.end_s for s in out)


# -- pooling --------------------------------------------------------------------

def test_pool_examples():
    np.testing.assert_array_equal(pool_rows(np.array([[1, 3], [3, 5]])), [2, 4])
    np.testing.assert_array_equal(pool_rows(np.array([[7, 8], [9, 10]]), "cls_first"), [7, 8])
    row = np.array([[0.5, -1.5, 2.0]])
    np.testing.assert_array_equal(pool_rows(row), pool_rows(row, "cls_first"))


def test_pool_rejects_bad_input():
    with pytest.raises(SchemaError):
        pool_rows(np.zeros(3))
    with pytest.raises(DomainError):
        pool_rows(np.zeros((2, 3)), "max")


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.integers(2, 12), st.integers(1, 16))
def test_mean_pool_ignores_row_order_but_cls_does_not(seed, rows, cols):
    r = np.random.default_rng(seed)
    m = r.standard_normal((rows, cols))
    perm = np.roll(np.arange(rows), 1)
    np.testing.assert_allclose(pool_rows(m[perm]), pool_rows(m), rtol=1e-12, atol=1e-15)
    assert not np.array_equal(pool_rows(m[perm], "cls_first"), pool_rows(m, "cls_first"))


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.floats(-1e3, 1e3, allow_subnormal=False))
def test_mean_pool_commutes_with_scaling(seed, c):
    m = np.random.default_rng(seed).standard_normal((5, 7))
    np.testing.assert_allclose(pool_rows(c * m), c * pool_rows(m), rtol=1e-12, atol=1e-12)


# -- SWEM ------------------------------------------------------------------------

def test_swem_round_trip(tmp_path, rng):
    m = rng.standard_normal((5, 3)).astype(np.float32)
    write_swem(m, tmp_path / "m.swem")
    back = read_swem(tmp_path / "m.swem")
    assert back.dtype == np.float32
    assert back.tobytes() == m.tobytes()


def test_swem_layout(tmp_path):
    write_swem(np.array([[1.0, 2.0]]), tmp_path / "m.swem")
    raw = (tmp_path / "m.swem").read_bytes()
    assert raw[:4] == b"SWEM" and raw[4] == 1
    assert raw[8:16] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert len(raw) == 16 + 8


def test_swem_bad_magic(tmp_path):
    raw = bytearray(swem_bytes(np.zeros((2, 2))))
    raw[:4] = b"SWEX"
    (tmp_path / "bad.swem").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_swem(tmp_path / "bad.swem")


def test_swem_bad_version():
    raw = bytearray(swem_bytes(np.zeros((2, 2))))
    raw[4] = 2
    with pytest.raises(FormatError):
        parse_swem(bytes(raw))


def test_swem_truncated_payload(tmp_path):
    raw = swem_bytes(np.zeros((10, 10)))[:-4]
    (tmp_path / "short.swem").write_bytes(raw)
    with pytest.raises(TruncationError):
        read_swem(tmp_path / "short.swem")


def test_swem_trailing_bytes(tmp_path):
    (tmp_path / "long.swem").write_bytes(swem_bytes(np.zeros((2, 2))) + b"\0\0\0\0")
    with pytest.raises(TruncationError):
        read_swem(tmp_path / "long.swem")


def test_swem_rejects_non_finite(tmp_path):
    with pytest.raises(SchemaError):
        write_swem(np.array([[np.inf]]), tmp_path / "x.swem")


@settings(max_examples=300)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_swem_round_trip_is_bit_exact(rows, cols, seed):
    r = np.random.default_rng(seed)
    m = (r.standard_normal((rows, cols)) * 10.0 ** r.integers(-30, 30)).astype(np.float32)
    back, end = parse_swem(swem_bytes(m))
    assert end == 16 + 4 * rows * cols
    assert back.tobytes() == m.tobytes()


# -- labels ----------------------------------------------------------------------

def test_load_labels(tmp_path):
    p = tmp_path / "labels.csv"
    p.write_text("subject_id,label\ns001,1\ns002,0\n")
    assert load_labels(p) == {"s001": 1, "s002": 0}


def test_duplicate_label(tmp_path):
    p = tmp_path / "labels.csv"
    p.write_text("subject_id,label\ns001,1\ns001,0\n")
    with pytest.raises(DuplicateError):
        load_labels(p)


def test_label_out_of_range(tmp_path):
    p = tmp_path / "labels.csv"
    p.write_text("subject_id,label\ns001,2\n")
    with pytest.raises(ValueError):
        load_labels(p)


def test_labels_round_trip(tmp_path):
    labels = {"a": 0, "b": 1, "c": 1}
    write_labels(labels, tmp_path / "l.csv")
    assert load_labels(tmp_path / "l.csv") == labels


# -- manifests and assembly --------------------------------------------------------

def _tiny_corpus(root, rng, n_per_split=(2, 2, 2), wav=False):
    subjects, labels = [], {}
    for split, n in zip(("train", "dev", "test"), n_per_split):
        for i in range(n):
            sid = f"{split}{i}"
            entry = {"id": sid, "split": split, "audio": [], "text": []}
            for t in range(3):
                for mod, rows in (("audio", 1), ("text", 4)):
                    rel = f"{mod}_{sid}_{t}.swem"
                    write_swem(rng.standard_normal((rows, 6)), root / rel)
                    entry[mod].append(rel)
            if wav:
                x = 0.3 * np.sin(2 * np.pi * 150 * np.arange(8000) / 16000)
                write_wav(root / f"{sid}.wav", to_pcm16(x), 16000)
                entry["wav"] = [f"{sid}.wav"]
            subjects.append(entry)
            labels[sid] = i % 2
    write_labels(labels, root / "labels.csv")
    (root / "manifest.json").write_text(json.dumps({"subjects": subjects, "labels": "labels.csv"}))
    return root / "manifest.json"


def test_assemble_means_three_tasks(tmp_path, rng):
    manifest = _tiny_corpus(tmp_path, rng)
    data = assemble_dataset(manifest)
    assert data.sizes() == (2, 2, 2)
    rec = data.train[0]
    expected = np.mean([read_swem(tmp_path / f"audio_train0_{t}.swem")[0].astype(float)
                        for t in range(3)], axis=0)
    np.testing.assert_allclose(rec.audio_vec, expected, rtol=1e-12)
    assert rec.label == 0 and rec.acoustic_vec is None


def test_assemble_cls_pooling(tmp_path, rng):
    manifest = _tiny_corpus(tmp_path, rng)
    data = assemble_dataset(manifest, text_pool="cls_first")
    expected = np.mean([read_swem(tmp_path / f"text_dev1_{t}.swem")[0].astype(float)
                        for t in range(3)], axis=0)
    np.testing.assert_allclose(data.dev[1].text_vec, expected, rtol=1e-12)


def test_assemble_extracts_wav_features(tmp_path, rng):
    manifest = _tiny_corpus(tmp_path, rng, wav=True)
    cache = {}
    data = assemble_dataset(manifest, acoustic_version="v2", feature_cache=cache)
    assert data.test[0].acoustic_vec.shape == (40,)
    assert len(cache) == 6


def test_overlapping_ids_are_schema_error(tmp_path, rng):
    manifest = _tiny_corpus(tmp_path, rng)
    doc = json.loads(manifest.read_text())
    doc["subjects"][2]["id"] = doc["subjects"][0]["id"]
    manifest.write_text(json.dumps(doc))
    with pytest.raises(SchemaError, match="both"):
        load_manifest(manifest)


def test_missing_file_names_subject(tmp_path, rng):
    manifest = _tiny_corpus(tmp_path, rng)
    (tmp_path / "audio_dev1_2.swem").unlink()
    with pytest.raises(FileNotFoundError, match="dev1"):
        assemble_dataset(manifest)


def test_dim_mismatch_is_schema_error(tmp_path, rng):
    manifest = _tiny_corpus(tmp_path, rng)
    write_swem(rng.standard_normal((1, 9)), tmp_path / "audio_test0_0.swem")
    with pytest.raises(SchemaError):
        assemble_dataset(manifest)


def test_synthetic_split_sizes(small_corpus):
    data = assemble_dataset(small_corpus.manifest, include_acoustic=False)
    assert data.sizes() == (40, 20, 20)
    assert all(r.label is None for r in data.test)
    with_test = assemble_dataset(small_corpus.manifest, include_acoustic=False,
                                 labels_path=small_corpus.test_labels)
    assert all(r.label is not None for r in with_test.test)
