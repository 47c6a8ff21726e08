import logging

import numpy as np
import pytest

from wenets import corpus
from wenets.corpus import ManifestEntry, SegmentLoader, TargetMapper
from wenets.dsp_io import SEGMENT_LENGTH, SegmentStore
from wenets.errors import ConfigError, ManifestError, MissingTargetError


def _entries(n: int, dataset: str = "d0", start: int = 0) -> list[ManifestEntry]:
    return [
        ManifestEntry("store.weseg", start + index, dataset, pesq=1.0 + 3.5 * index / max(n - 1, 1))
        for index in range(n)
    ]


@pytest.fixture()
def fixture_store(tmp_path):
    store = tmp_path / "synth.weseg"
    manifest = tmp_path / "synth.csv"
    entries = corpus.synth_fixture(np.random.default_rng(4), 12, store, manifest)
    return store, manifest, entries


@pytest.mark.parametrize("n, expected", [(100, (50, 40, 10)), (10, (5, 4, 1))])
def test_split_sizes(n, expected) -> None:
    assignment = corpus.split(_entries(n), rng=np.random.default_rng(0))

    counts = assignment.counts()
    assert (counts["train"], counts["test"], counts["validation"]) == expected


def test_split_is_per_dataset() -> None:
    entries = _entries(200, "a") + _entries(200, "b", start=200)

    assignment = corpus.split(entries, seed=3)

    assert assignment.counts() == {"train": 200, "test": 160, "validation": 40}
    for dataset in ("a", "b"):
        labels = [label for entry, label in zip(entries, assignment.labels) if entry.source_dataset == dataset]
        assert labels.count("train") == 100
        assert labels.count("test") == 80


def test_split_partitions_entry_ids() -> None:
    assignment = corpus.split(_entries(37), seed=1)

    ids = [set(assignment.ids(label)) for label in corpus.SPLIT_LABELS]

    assert set().union(*ids) == set(range(37))
    assert sum(len(group) for group in ids) == 37


def test_split_is_reproducible() -> None:
    entries = _entries(50)

    assert corpus.split(entries, seed=9).labels == corpus.split(entries, seed=9).labels
    assert corpus.split(entries, seed=9).labels != corpus.split(entries, seed=10).labels


def test_small_dataset_goes_to_train(caplog) -> None:
    entries = _entries(20, "big") + _entries(2, "tiny", start=20)

    with caplog.at_level(logging.WARNING):
        assignment = corpus.split(entries, seed=0)

    assert assignment.labels[20:] == ("train", "train")
    assert "tiny" in caplog.text


def test_holdout_dataset_is_all_test() -> None:
    entries = _entries(10, "seen") + _entries(6, "unseen", start=10)

    assignment = corpus.split(entries, seed=0, holdout=["unseen"])

    assert assignment.labels[10:] == ("test",) * 6
    with pytest.raises(ManifestError):
        corpus.split(entries, holdout=["missing"])


def test_split_rejects_bad_inputs() -> None:
    with pytest.raises(ManifestError, match="empty"):
        corpus.split([])
    with pytest.raises(ConfigError):
        corpus.split(_entries(5), fractions=(0.5, 0.5, 0.5))


def test_split_file_round_trip(tmp_path) -> None:
    assignment = corpus.split(_entries(30), seed=2)
    path = tmp_path / "split.csv"

    corpus.write_split(path, assignment)

    assert corpus.read_split(path, 30) == assignment
    with pytest.raises(ManifestError):
        corpus.read_split(path, 31)


def test_ipa_doubles_and_keeps_targets() -> None:
    entries = _entries(4)

    augmented = corpus.apply_ipa(entries)

    assert len(augmented) == 8
    for original, twin in zip(entries, augmented[4:]):
        assert twin.phase_inverted
        assert twin.pesq == original.pesq
        assert twin.record_index == original.record_index


def test_ipa_twins_keep_split_labels() -> None:
    entries = _entries(10)
    assignment = corpus.split(entries, seed=0)

    augmented, doubled = corpus.augment_manifest(entries, assignment)

    assert len(augmented) == 20
    assert doubled.labels[10:] == assignment.labels
    assert doubled.counts()["train"] == 2 * assignment.counts()["train"]


def test_ipa_twice_is_rejected() -> None:
    with pytest.raises(ManifestError, match="IPA already applied"):
        corpus.apply_ipa(corpus.apply_ipa(_entries(3)))


def test_affine_mapping_endpoints() -> None:
    mapper = corpus.affine_mapper()

    np.testing.assert_allclose(mapper.map([1.0, 2.75, 4.5]), [-1.0, 0.0, 1.0])
    values = np.random.default_rng(0).uniform(1.0, 4.5, 50)
    np.testing.assert_allclose(mapper.unmap(mapper.map(values)), values, atol=1e-12)


def test_zscore_mapping_for_stoi() -> None:
    entries = [
        ManifestEntry("s.weseg", 0, "d", stoi=0.8),
        ManifestEntry("s.weseg", 1, "d", stoi=1.0),
    ]

    mapper = corpus.fit_mapper("stoi", entries)

    assert mapper.kind == "zscore"
    assert mapper.center == pytest.approx(0.9)
    assert mapper.spread == pytest.approx(0.1)
    np.testing.assert_allclose(mapper.map([0.8, 1.0]), [-1.0, 1.0])


def test_quality_metrics_use_fixed_affine_map() -> None:
    assert corpus.fit_mapper("polqa", [ManifestEntry("s.weseg", 0, "d", polqa=3.0)]) == corpus.affine_mapper()


def test_zero_variance_stoi_is_rejected() -> None:
    entries = [ManifestEntry("s.weseg", index, "d", stoi=0.7) for index in range(3)]

    with pytest.raises(ManifestError, match="zero variance"):
        corpus.fit_mapper("stoi", entries)


@pytest.mark.parametrize("value", [0.1, 0.3, 0.7, 0.93])
def test_identical_stoi_targets_never_yield_tiny_spread(value) -> None:
    entries = [ManifestEntry("s.weseg", index, "d", stoi=value) for index in range(7)]

    with pytest.raises(ManifestError, match="zero variance"):
        corpus.fit_mapper("stoi", entries)


def test_mapper_rejects_bad_spread() -> None:
    with pytest.raises(ValueError):
        TargetMapper("zscore", 0.5, 0.0)


def test_missing_target_is_reported() -> None:
    entry = ManifestEntry("s.weseg", 0, "d", pesq=2.0)

    with pytest.raises(MissingTargetError):
        entry.target("polqa")


def test_entry_rejects_out_of_range_target() -> None:
    with pytest.raises(ManifestError):
        ManifestEntry("s.weseg", 0, "d", pesq=5.0)


def test_manifest_round_trip(fixture_store, tmp_path) -> None:
    store, manifest, entries = fixture_store

    loaded = corpus.read_manifest(manifest)

    assert len(loaded) == 12
    assert [entry.record_index for entry in loaded] == list(range(12))
    assert all(entry.segment_path == str(store) for entry in loaded)
    assert [entry.pesq for entry in loaded] == pytest.approx([entry.pesq for entry in entries])
    assert {entry.source_dataset for entry in loaded} == {"synth0", "synth1"}
    assert "phase_inverted" not in manifest.read_text().splitlines()[0]


def test_manifest_without_metric_column(tmp_path) -> None:
    path = tmp_path / "partial.csv"
    path.write_text("segment_path,record_index,source_dataset,pesq\nstore.weseg,0,d,3.1\n")

    (entry,) = corpus.read_manifest(path)

    assert entry.pesq == pytest.approx(3.1)
    with pytest.raises(MissingTargetError):
        entry.target("polqa")


def test_manifest_missing_required_column(tmp_path) -> None:
    path = tmp_path / "broken.csv"
    path.write_text("segment_path,pesq\nstore.weseg,3.1\n")

    with pytest.raises(ManifestError, match="missing column"):
        corpus.read_manifest(path)


def test_concat_rejects_duplicates() -> None:
    entries = _entries(3)

    assert len(corpus.concat_manifests(entries, _entries(2, start=3))) == 5
    with pytest.raises(ManifestError, match="duplicate"):
        corpus.concat_manifests(entries, entries[:1])


def test_fixture_segments_are_active(fixture_store) -> None:
    store, _, entries = fixture_store

    records = SegmentStore(store)

    assert len(records) == len(entries)
    for index in range(len(records)):
        record = records[index]
        assert record.samples.shape == (SEGMENT_LENGTH,)
        assert record.activity_factor >= 0.75


def test_synth_targets_follow_snr() -> None:
    assert corpus.synth_targets(-5.0)["pesq"] == pytest.approx(1.0)
    assert corpus.synth_targets(40.0)["pesq"] == pytest.approx(4.5)
    assert corpus.synth_targets(100.0)["pesq"] == 4.5
    assert corpus.synth_targets(-5.0)["stoi"] < corpus.synth_targets(40.0)["stoi"] <= 1.0


def test_loader_negates_phase_inverted_twins(fixture_store) -> None:
    _, _, entries = fixture_store
    twins = corpus.apply_ipa(entries)
    loader = SegmentLoader()

    original = loader.samples(twins[0])
    inverted = loader.samples(twins[len(entries)])

    np.testing.assert_array_equal(inverted, -original)
    assert loader.segment(twins[len(entries)]).phase_inverted


def test_loader_reports_missing_record(fixture_store) -> None:
    store, _, _ = fixture_store

    with pytest.raises(ManifestError, match="unreadable"):
        SegmentLoader().samples(ManifestEntry(str(store), 99, "d"))


def test_batches_cover_ids_once(fixture_store) -> None:
    _, _, entries = fixture_store

    produced = list(corpus.batches(entries, 5, seed=1, metric="pesq", mapper=corpus.affine_mapper()))

    assert [len(batch) for batch in produced] == [5, 5, 2]
    assert sorted(entry_id for batch in produced for entry_id in batch.entry_ids) == list(range(12))
    first = produced[0]
    assert first.inputs.shape == (5, 1, SEGMENT_LENGTH)
    expected = corpus.affine_mapper().map([entries[entry_id].pesq for entry_id in first.entry_ids])
    np.testing.assert_allclose(first.targets, expected)


def test_batches_reshuffle_per_epoch(fixture_store) -> None:
    _, _, entries = fixture_store

    def order(seed, epoch):
        return [batch.entry_ids for batch in corpus.batches(entries, 4, seed=seed, epoch=epoch)]

    assert order(0, 0) == order(0, 0)
    assert order(0, 0) != order(0, 1)


def test_training_batches_drop_a_single_leftover(fixture_store) -> None:
    _, _, entries = fixture_store

    sizes = [len(batch) for batch in corpus.batches(entries, 11, training=True)]

    assert sizes == [11]


def test_batch_counts_for_full_batches() -> None:
    entries = _entries(110)
    loader = SegmentLoader()
    loader.samples = lambda entry: np.zeros(SEGMENT_LENGTH, dtype=np.float32)

    assert len(list(corpus.batches(entries, 55, loader=loader))) == 2
    assert [len(batch) for batch in corpus.batches(_entries(56), 55, training=True, loader=loader)] == [55]


def test_batches_crop_to_input_length(fixture_store) -> None:
    _, _, entries = fixture_store

    batch = next(corpus.batches(entries, 3, input_length=2880, shuffle=False))

    assert batch.inputs.shape == (3, 1, 2880)
    assert batch.entry_ids == (0, 1, 2)


def test_batches_reject_missing_target() -> None:
    entries = [ManifestEntry("s.weseg", 0, "d", pesq=2.0)]

    with pytest.raises(MissingTargetError):
        next(corpus.batches(entries, 1, metric="stoi"))


def test_target_summary(fixture_store) -> None:
    _, _, entries = fixture_store

    summary, histogram = corpus.target_summary(entries, bins=10)

    assert list(summary["metric"]) == ["pesq", "polqa", "stoi"]
    assert list(summary["count"]) == [12, 12, 12]
    assert histogram[histogram["metric"] == "pesq"]["count"].sum() == 12
    assert len(histogram) == 30
