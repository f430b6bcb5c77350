import json

import numpy as np
import pytest
from sklearn.model_selection import train_test_split
from sklearn.neighbors import NearestCentroid

from gesturestream.data import (SHREC21_CLASSES, DatasetManifest, SyntheticConfig, gen_synthetic,
                                import_shrec21, load_canonical, parse_shrec21_sequence,
                                resample_frames, resample_window, save_canonical,
                                sequence_from_dict, write_synthetic)
from gesturestream.exceptions import ConfigError, ParseError
from gesturestream.skeleton import (NO_GESTURE, GestureEvent, SkeletonSequence, normalize_frames,
                                    segment_sequences)


def sample_sequence(rng, gamma=8):
    return SkeletonSequence(rng.normal(size=(gamma, 20, 3)), (GestureEvent("A", 1, 4),), id="s1")


class TestCanonical:
    def test_round_trip(self, tmp_path, rng):
        seq = sample_sequence(rng)
        save_canonical(seq, tmp_path / "s.json")
        back = load_canonical(tmp_path / "s.json")
        assert np.array_equal(back.frames, seq.frames)
        assert back.annotations == seq.annotations and back.id == seq.id

    def test_minimal_file(self):
        seq = sequence_from_dict({"joints": 1, "frames": [[[0, 0, 1]]]})
        assert len(seq) == 1 and seq.num_joints == 1

    @pytest.mark.parametrize("doc, where", [
        ([], "<dict>"),
        ({"frames": [[[0, 0, 0]]]}, "<dict>"),
        ({"joints": 0, "frames": [[[0, 0, 0]]]}, "joints"),
        ({"joints": 1, "frames": []}, "frames"),
        ({"joints": 2, "frames": [[[0, 0, 0]]]}, "frames[0]"),
        ({"joints": 1, "frames": [[[0, 0, "x"]]]}, "frames[0]"),
        ({"joints": 1, "frames": [[[0, 0, 0]]], "annotations": [{"label": "A", "start": 0, "end": 1}]},
         "annotations"),
    ])
    def test_schema_errors(self, doc, where):
        with pytest.raises(ParseError) as err:
            sequence_from_dict(doc)
        assert where in str(err.value)

    def test_joint_mismatch_against_manifest(self):
        with pytest.raises(ParseError):
            sequence_from_dict({"joints": 1, "frames": [[[0, 0, 0]]]}, expected_joints=20)

    def test_invalid_json(self, tmp_path):
        (tmp_path / "bad.json").write_text("{\n  oops")
        with pytest.raises(ParseError):
            load_canonical(tmp_path / "bad.json")


def write_shrec_fixture(root, n_train=108, n_test=72, frames=4, rng=None):
    rng = rng or np.random.default_rng(0)
    for split, n in (("training_set", n_train), ("test_set", n_test)):
        seq_dir = root / split / "sequences"
        seq_dir.mkdir(parents=True)
        lines = []
        for i in range(1, n + 1):
            data = rng.normal(size=(frames, 60))
            (seq_dir / f"{i}.txt").write_text("\n".join(";".join(f"{v:.5f}" for v in row) for row in data))
            label = SHREC21_CLASSES[i % len(SHREC21_CLASSES)]
            lines.append(f"{i};{label};1;2;")
        (root / split / "annotations.txt").write_text("\n".join(lines))


class TestShrec21:
    def test_import_release(self, tmp_path):
        write_shrec_fixture(tmp_path / "raw")
        manifest = import_shrec21(tmp_path / "raw", tmp_path / "out")
        assert len(manifest.split("train")) == 108 and len(manifest.split("test")) == 72
        assert len(manifest.classes) == 19 and manifest.classes[-1] == NO_GESTURE
        loaded = DatasetManifest.load(tmp_path / "out" / "manifest.json")
        seqs = loaded.load_split("train")
        assert {ev.label for s in seqs for ev in s.annotations} == set(SHREC21_CLASSES)
        assert seqs[0].frames.shape == (4, 20, 3)

    def test_truncated_line_named(self, tmp_path):
        path = tmp_path / "seq.txt"
        path.write_text(";".join(["0.1"] * 60) + "\n" + ";".join(["0.1"] * 59))
        with pytest.raises(ParseError, match=r"seq.txt:2"):
            parse_shrec21_sequence(path)

    def test_unknown_class(self, tmp_path):
        write_shrec_fixture(tmp_path / "raw", 2, 0)
        (tmp_path / "raw" / "training_set" / "annotations.txt").write_text("1;Bogus;0;1;")
        with pytest.raises(ParseError, match="Bogus"):
            import_shrec21(tmp_path / "raw", tmp_path / "out")

    def test_empty_directory(self, tmp_path):
        with pytest.raises(ParseError):
            import_shrec21(tmp_path, tmp_path / "out")


class TestResample:
    def test_identity_and_constant(self, rng):
        x = rng.normal(size=(7, 2, 3))
        assert np.array_equal(resample_frames(x, 7), x)
        const = np.ones((9, 2, 3)) * 4.0
        assert np.allclose(resample_frames(const, 20), 4.0)

    def test_linear_trajectory(self):
        t = np.arange(10.0)
        frames = (2.0 * t + 1.0)[:, None, None] * np.ones((10, 1, 3))
        out = resample_frames(frames, 5)
        times = np.linspace(0, 9, 5)
        assert np.allclose(out[:, 0, 0], 2.0 * times + 1.0)

    def test_window(self, rng):
        seq = sample_sequence(rng, 13)
        assert len(resample_window(seq, 20)) == 20
        with pytest.raises(ConfigError):
            resample_frames(seq.frames, 0)


class TestSynthetic:
    def test_deterministic(self):
        cfg = SyntheticConfig(num_train=2, num_test=1, seed=4)
        _, a, _ = gen_synthetic(cfg)
        _, b, _ = gen_synthetic(cfg)
        assert all(np.array_equal(x.frames, y.frames) and x.annotations == y.annotations for x, y in zip(a, b))

    def test_stream_structure(self):
        cfg = SyntheticConfig(num_train=6, num_test=0, seed=1)
        classes, seqs, splits = gen_synthetic(cfg)
        assert classes[-1] == NO_GESTURE and splits == ["train"] * 6
        for s in seqs:
            assert 3 <= len(s.annotations) <= 5
            assert all(30 <= e.length <= 45 for e in s.annotations)
            assert s.annotations[0].start >= 15

    def test_written_dataset(self, tmp_path):
        write_synthetic(SyntheticConfig(num_train=2, num_test=1, seed=2), tmp_path)
        manifest = DatasetManifest.load(tmp_path / "manifest.json")
        assert len(manifest.load_split("test")) == 1
        assert json.loads((tmp_path / "synthetic_config.json").read_text())["seed"] == 2

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            SyntheticConfig(classes=("CircleCW",))
        with pytest.raises(ConfigError):
            SyntheticConfig(classes=("CircleCW", "Wave"))

    @pytest.mark.filterwarnings("ignore:self.within_class_std_dev_")
    def test_prototypes_are_separable(self):
        cfg = SyntheticConfig(classes=("CircleCW", "SwipeLeft"), num_train=40, num_test=0, seed=9)
        _, seqs, _ = gen_synthetic(cfg)
        feats, labels = [], []
        for s in seqs:
            for seg, label in segment_sequences(s)[0]:
                win = normalize_frames(resample_frames(seg.frames, 20))
                feats.append(win.reshape(-1))
                labels.append(label)
        x_tr, x_te, y_tr, y_te = train_test_split(np.array(feats), labels, test_size=0.5, random_state=0)
        acc = (NearestCentroid().fit(x_tr, y_tr).predict(x_te) == np.array(y_te)).mean()
        assert len(labels) >= 100 and acc >= 0.99
