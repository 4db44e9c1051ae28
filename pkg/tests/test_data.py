import numpy as np
import pytest

from lowbit_emotion import data
from lowbit_emotion.data import CorpusError, FaceStyle, SyntheticSpec, gen_synthetic, make_inputs, make_pairs
from lowbit_emotion.codec import CodecConfig
from lowbit_emotion.metrics import lin_ccc


@pytest.fixture
def fixture_dir(tmp_path, small_corpus):
    data.write_corpus(small_corpus[:2], tmp_path)
    return tmp_path


def test_loader_round_trip(fixture_dir, small_corpus):
    seqs = data.load_avec_like(fixture_dir)
    assert [s.id for s in seqs] == [s.id for s in small_corpus[:2]]
    for a, b in zip(seqs, small_corpus):
        assert len(a) == len(b)
        np.testing.assert_array_equal(a.valence, b.valence)
        assert np.abs(a.frames - b.frames).max() <= 0.5 / 255 + 1e-12


def test_loader_range_error_names_row(fixture_dir):
    p = fixture_dir / "seq000" / "labels.csv"
    lines = p.read_text().splitlines()
    lines[3] = "2,1.5"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorpusError, match=r"labels.csv:4"):
        data.load_avec_like(fixture_dir)


def test_loader_count_mismatch(fixture_dir):
    (fixture_dir / "seq001" / "frame_000011.pgm").unlink()
    with pytest.raises(CorpusError, match="seq001"):
        data.load_avec_like(fixture_dir)


@pytest.mark.parametrize("content,pattern", [
    ("idx,v\n0,0.1\n", "header"),
    ("frame,valence\n0,abc\n", "unparseable"),
    ("frame,valence\n1,0.1\n", "expected frame index"),
])
def test_loader_bad_labels(fixture_dir, content, pattern):
    (fixture_dir / "seq000" / "labels.csv").write_text(content)
    with pytest.raises(CorpusError, match=pattern):
        data.load_avec_like(fixture_dir)


def test_loader_missing_pieces(tmp_path, fixture_dir):
    with pytest.raises(CorpusError):
        data.load_avec_like(tmp_path / "nope")
    (tmp_path / "empty").mkdir()
    with pytest.raises(CorpusError):
        data.load_avec_like(tmp_path / "empty")
    (fixture_dir / "seq000" / "labels.csv").unlink()
    with pytest.raises(CorpusError, match="missing labels"):
        data.load_avec_like(fixture_dir)


def test_loader_wrong_frame_size(fixture_dir):
    from lowbit_emotion.imageops import write_pgm
    write_pgm(fixture_dir / "seq000" / "frame_000000.pgm", np.zeros((48, 48)))
    with pytest.raises(CorpusError, match="frame_000000"):
        data.load_avec_like(fixture_dir)


def test_sequence_validation():
    with pytest.raises(CorpusError):
        data.LabeledSequence("x", np.zeros((2, 96, 96)), np.zeros(3))
    with pytest.raises(CorpusError):
        data.LabeledSequence("x", np.zeros((1, 96, 96)), np.array([1.2]))


def test_synthetic_determinism_and_labels():
    spec = SyntheticSpec(n_sequences=3, frames_per_sequence=80, seed=9)
    a, b = gen_synthetic(spec), gen_synthetic(spec)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.frames, y.frames)
        np.testing.assert_array_equal(x.valence, y.valence)
        assert np.all(np.abs(x.valence) <= 1)
        assert x.valence.std() > 0.1
        assert x.frames.shape == (80, 96, 96)
    assert not np.array_equal(a[0].frames, gen_synthetic(SyntheticSpec(3, 80, 10))[0].frames)


def test_valence_only_changes_mouth():
    style = FaceStyle()
    pos, neg = data.render_face(1.0, style), data.render_face(-1.0, style)
    rows, cols = data.mouth_box(style)
    diff = np.abs(pos - neg)
    assert diff[rows, cols].max() > 0.2
    diff[rows, cols] = 0
    assert diff.max() < 1e-12


def test_linear_probe_learns_valence():
    seqs = gen_synthetic(SyntheticSpec(n_sequences=6, frames_per_sequence=100, seed=3))
    x_tr = np.concatenate([q.frames for q in seqs[:4]]).reshape(400, -1)
    y_tr = np.concatenate([q.valence for q in seqs[:4]])
    x_te = np.concatenate([q.frames for q in seqs[4:]]).reshape(200, -1)
    y_te = np.concatenate([q.valence for q in seqs[4:]])
    mu = x_tr.mean(axis=0)
    a = x_tr - mu
    w = np.linalg.solve(a.T @ a + 1.0 * np.eye(a.shape[1]), a.T @ (y_tr - y_tr.mean()))
    pred = (x_te - mu) @ w + y_tr.mean()
    assert lin_ccc(pred, y_te) > 0.8


def test_make_pairs_shapes_and_log(small_corpus):
    seq = small_corpus[0]
    x, info = make_inputs(seq.frames, 3)
    assert info["lr_shape"] == (32, 32) and x.shape == (12, 96, 96)
    assert info["stages"] == ("downsample", "upsample", "normalize")
    p = make_pairs(seq, 3, qp=0)
    assert all(e[2] == 3 and e[3] == 0 and "downsample" in e[4] for e in p.log)
    hr = make_pairs(seq, None)
    assert all("downsample" not in e[4] for e in hr.log)
    with pytest.raises(ValueError):
        make_pairs(seq, 7)
    with pytest.raises(ValueError):
        make_inputs(seq.frames, None, CodecConfig(qp=0))


def test_coded_qp0_close_to_plain(small_corpus):
    from lowbit_emotion.imageops import downsample
    frames = small_corpus[1].frames[:4]
    from lowbit_emotion.codec import encode_decode
    for f in frames:
        lr = downsample(f, 4)
        assert np.abs(encode_decode(lr, CodecConfig(qp=0))[0] - np.clip(lr, 0, 1)).max() < 2 / 255
    _, info = make_inputs(frames, 4, CodecConfig(qp=0))
    assert len(info["bpp"]) == 4 and min(info["bpp"]) > 0


def test_hr_target_in_input_units(small_corpus):
    # identity map on the input scores exactly the bicubic baseline error in normalised units
    p = make_pairs(small_corpus[0], 4, target="hr")
    mu, sigma = p.stats
    np.testing.assert_allclose(p.targets * sigma + mu, small_corpus[0].frames, atol=1e-12)


def test_split_is_by_sequence():
    seqs = gen_synthetic(SyntheticSpec(10, 3, 0))
    tr, va, te = data.split_sequences(seqs, 0.1, 0.2, seed=1)
    ids = [s.id for s in tr + va + te]
    assert sorted(ids) == sorted(s.id for s in seqs)
    assert len(va) == 1 and len(te) == 2
    with pytest.raises(CorpusError):
        data.split_sequences(seqs[:1], 0.1)
