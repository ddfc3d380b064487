from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asdkit.corpus import (ClipMeta, SynthSpec, format_clip_name, parse_clip_name,
                           read_manifest_csv, read_truth_csv, scan_dataset, synth_corpus,
                           write_manifest_csv)
from asdkit.errors import CorpusError, ParseError


class TestParseClipName:
    def test_attributed_source_normal(self):
        parsed = parse_clip_name("source_normal_0001_spd28V.wav")
        assert parsed == ("source", "normal", 1, "spd28V")

    def test_unattributed_target_anomaly(self):
        parsed = parse_clip_name("target_anomaly_0042.wav")
        assert parsed == ("target", "anomalous", 42, None)

    def test_malformed_name_rejected(self):
        with pytest.raises(ParseError):
            parse_clip_name("bogus.wav")

    @pytest.mark.parametrize("name,position", [
        ("sauce_normal_0001.wav", 0),
        ("source_weird_0001.wav", 7),
        ("source_normal_001.wav", 14),
        ("source_normal_0001_", 19),
    ])
    def test_error_positions(self, name, position):
        with pytest.raises(ParseError) as err:
            parse_clip_name(name)
        assert err.value.position == position

    @given(
        domain=st.sampled_from(["source", "target"]),
        condition=st.sampled_from(["normal", "anomalous"]),
        index=st.integers(min_value=0, max_value=99999),
        attribute=st.one_of(st.none(), st.from_regex(r"[A-Za-z0-9][A-Za-z0-9-]{0,11}", fullmatch=True)),
    )
    @settings(max_examples=200, deadline=None)
    def test_round_trip(self, domain, condition, index, attribute):
        name = format_clip_name(domain, condition, index, attribute)
        parsed = parse_clip_name(name)
        assert format_clip_name(*parsed) == name
        assert parsed == (domain, condition, index, attribute)


class TestScanDataset:
    def _touch(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"RIFF")

    def test_single_attributed_clip(self, tmp_path):
        self._touch(tmp_path / "ToyCar/train/source_normal_0001_spd28V.wav")
        manifest = scan_dataset(tmp_path)
        assert len(manifest.clips) == 1
        assert manifest.attributed_machines == ("ToyCar",)
        clip = manifest.clips[0]
        assert clip.machine_type == "ToyCar" and clip.attribute == "spd28V"

    def test_empty_directory_is_an_error(self, tmp_path):
        with pytest.raises(CorpusError, match="no clips found"):
            scan_dataset(tmp_path)

    def test_mixed_attributes_rejected(self, tmp_path):
        self._touch(tmp_path / "fan/train/source_normal_0001_spd1.wav")
        self._touch(tmp_path / "fan/train/source_normal_0002.wav")
        with pytest.raises(CorpusError, match="inconsistent attributes"):
            scan_dataset(tmp_path)

    def test_unparseable_name_reports_the_file(self, tmp_path):
        self._touch(tmp_path / "fan/train/junk.wav")
        with pytest.raises(CorpusError, match="junk.wav"):
            scan_dataset(tmp_path)

    def test_anomalous_train_clip_rejected(self, tmp_path):
        self._touch(tmp_path / "fan/train/source_anomaly_0001.wav")
        with pytest.raises(CorpusError, match="anomalous"):
            scan_dataset(tmp_path)


def _tree_digest(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*.wav")):
        digest.update(path.relative_to(root).as_posix().encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


class TestSynthCorpus:
    def test_deterministic_trees(self, tmp_path):
        spec = SynthSpec(n_machines=1, attrs_per_machine=2, clips_per_attr_train=2,
                         clips_per_attr_test=2, clip_seconds=0.5, seed=7)
        synth_corpus(spec, tmp_path / "a", tmp_path / "truth_a.csv")
        synth_corpus(spec, tmp_path / "b", tmp_path / "truth_b.csv")
        assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
        assert (tmp_path / "truth_a.csv").read_bytes() == (tmp_path / "truth_b.csv").read_bytes()

    def test_clip_counts(self, tiny_corpus):
        manifest, _ = tiny_corpus
        spec = SynthSpec(n_machines=2, attrs_per_machine=2, clips_per_attr_train=6,
                         clips_per_attr_test=4)
        assert len(manifest.train_clips()) == 2 * 2 * 6
        assert len(manifest.test_clips()) == 2 * 2 * 4

    def test_train_split_has_no_anomalies(self, tiny_corpus):
        manifest, _ = tiny_corpus
        assert all(c.condition == "normal" for c in manifest.train_clips())

    def test_test_split_balanced_per_machine_and_domain(self, tiny_corpus):
        manifest, _ = tiny_corpus
        for machine in manifest.machines:
            for domain in ("source", "target"):
                normal = manifest.clips_of(machine=machine, split="test", domain=domain,
                                           condition="normal")
                anomalous = manifest.clips_of(machine=machine, split="test", domain=domain,
                                              condition="anomalous")
                assert len(normal) == len(anomalous) > 0

    def test_machine_partition(self, tiny_corpus):
        manifest, _ = tiny_corpus
        assert manifest.attributed_machines == ("machine00",)
        assert manifest.unattributed_machines == ("machine01",)
        assert set(manifest.attributed_machines) | set(manifest.unattributed_machines) \
            == set(manifest.machines)

    def test_hidden_table_covers_unattributed_clips(self, tiny_corpus):
        manifest, truth_path = tiny_corpus
        truth = read_truth_csv(truth_path)
        unattributed_clips = [c for c in manifest.clips if c.machine_type == "machine01"]
        assert set(truth) == {c.path for c in unattributed_clips}
        assert len({truth[c.path] for c in unattributed_clips}) == 2  # latent attrs

    def test_odd_test_count_rejected(self):
        with pytest.raises(ValueError, match="even"):
            SynthSpec(clips_per_attr_test=5).validate()

    def test_truth_inside_tree_rejected(self, tmp_path):
        spec = SynthSpec(n_machines=1, clip_seconds=0.5)
        with pytest.raises(ValueError, match="outside"):
            synth_corpus(spec, tmp_path / "c", tmp_path / "c" / "truth.csv")


class TestManifestCsv:
    def test_round_trip(self, tiny_corpus, tmp_path):
        manifest, _ = tiny_corpus
        write_manifest_csv(manifest, tmp_path / "manifest.csv")
        loaded = read_manifest_csv(tmp_path / "manifest.csv", manifest.root)
        assert loaded.clips == manifest.clips
        assert loaded.machines == manifest.machines
        assert loaded.attributed_machines == manifest.attributed_machines
