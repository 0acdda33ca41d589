import numpy as np
import pytest

from conftest import random_snapshot
from lora_forensics import spectral
from lora_forensics.container import TensorRecord, write_container
from lora_forensics.errors import InconsistentTopology, MalformedHeader, NoConvergence, UnlabeledSnapshot
from lora_forensics.features import (
    ExtractedModel,
    MatrixKind,
    SlotKey,
    Topology,
    build_tables,
    extract_features,
    extract_index,
    parse_kinds,
    read_feature_cache,
    resolve_threads,
    tables_from_models,
    write_feature_cache,
)
from lora_forensics.snapshot_io import LoraLayer, ModelSnapshot, SnapshotMeta, load_manifest

ALL = {MatrixKind.A, MatrixKind.B, MatrixKind.BA, MatrixKind.FROB}


def test_parse_kinds():
    assert parse_kinds("a, BA") == {MatrixKind.A, MatrixKind.BA}
    assert parse_kinds(["FROB"]) == {MatrixKind.FROB}
    with pytest.raises(ValueError):
        parse_kinds("A,C")
    with pytest.raises(ValueError):
        parse_kinds("")


def test_one_layer_three_kinds():
    snap = random_snapshot(np.random.default_rng(0), n_layers=1, r=3)
    feats = extract_features(snap)
    assert [slot for slot, _ in feats] == [SlotKey(0, MatrixKind.A), SlotKey(0, MatrixKind.B), SlotKey(0, MatrixKind.BA)]
    assert all(v.shape == (3,) for _, v in feats)


def test_values_match_spectral_functions():
    snap = random_snapshot(np.random.default_rng(1), n_layers=4, r=2)
    feats = dict(extract_features(snap, ALL))
    for i, ly in enumerate(snap.layers):
        np.testing.assert_allclose(feats[(i, MatrixKind.A)], spectral.factor_spectrum(ly.A, ly.rank), rtol=1e-12)
        np.testing.assert_allclose(feats[(i, MatrixKind.B)], spectral.factor_spectrum(ly.B, ly.rank), rtol=1e-12)
        np.testing.assert_allclose(feats[(i, MatrixKind.BA)], spectral.product_spectrum(ly.B, ly.A), rtol=1e-12)
        assert feats[(i, MatrixKind.FROB)].tolist() == [spectral.frobenius_stat(ly.B, ly.A)]


def test_full_model_slot_count():
    rng = np.random.default_rng(2)
    layers = tuple(LoraLayer(f"l{i:03d}", rng.standard_normal((24, 4)), rng.standard_normal((4, 20))) for i in range(132))
    snap = ModelSnapshot(layers, SnapshotMeta(lora_rank=4))
    assert len(extract_features(snap)) == 396
    feats = extract_features(snap, ALL)
    assert len(feats) == 528
    assert [s for s, _ in feats] == sorted((s for s, _ in feats), key=lambda s: s.sort_key())


def test_zero_layer_gives_zero_features():
    snap = ModelSnapshot((LoraLayer("z", np.zeros((5, 2)), np.zeros((2, 4))),))
    for _, vec in extract_features(snap, ALL):
        assert not vec.any()


def test_mixed_sizes_batch_correctly():
    rng = np.random.default_rng(3)
    layers = (
        LoraLayer("a", rng.standard_normal((6, 2)), rng.standard_normal((2, 9))),
        LoraLayer("b", rng.standard_normal((30, 5)), rng.standard_normal((5, 7))),
    )
    snap = ModelSnapshot(layers, SnapshotMeta(mixed_ranks=True))
    feats = dict(extract_features(snap))
    assert feats[(0, MatrixKind.BA)].shape == (2,)
    assert feats[(1, MatrixKind.A)].shape == (5,)
    np.testing.assert_allclose(feats[(1, MatrixKind.BA)], spectral.jacobi_svd_oracle(layers[1].B @ layers[1].A)[:5], rtol=1e-10)


def test_bitwise_deterministic():
    snap = random_snapshot(np.random.default_rng(4), n_layers=5, r=3)
    a, b = extract_features(snap, ALL), extract_features(snap, ALL)
    assert all(x[0] == y[0] and x[1].tobytes() == y[1].tobytes() for x, y in zip(a, b))


def test_failure_names_the_slot(monkeypatch):
    def boom(grams):
        raise NoConvergence("stuck")

    monkeypatch.setattr(spectral, "spectra_from_grams", boom)
    snap = random_snapshot(np.random.default_rng(5), n_layers=2, r=2)
    with pytest.raises(NoConvergence, match=r"layer 0 \(blk.0.attn\), kind A"):
        extract_features(snap)


def test_empty_kinds():
    with pytest.raises(ValueError):
        extract_features(random_snapshot(np.random.default_rng(6)), [])


def test_tables_from_index(small_corpus):
    index = load_manifest(small_corpus.manifest)
    tables = build_tables(index)
    cfg = small_corpus.config
    assert len(tables) == cfg.n_layers * 3
    for slot, table in tables.items():
        assert table.X.shape == (len(index), cfg.r)
        assert table.labels.tolist() == [e.label for e in index]
        assert table.model_ids == tuple(str(e.path) for e in index)


def test_threads_do_not_change_rows(small_corpus):
    index = load_manifest(small_corpus.manifest)
    one = extract_index(index, threads=1)
    many = extract_index(index, threads=4)
    for a, b in zip(one, many):
        assert a.model_id == b.model_id
        assert all(x[1].tobytes() == y[1].tobytes() for x, y in zip(a.features, b.features))


def test_single_snapshot_table(small_corpus):
    index = load_manifest(small_corpus.manifest)
    tables = build_tables(index.filter(lambda e: e.path == index.entries[0].path))
    assert all(len(t) == 1 for t in tables.values())


def test_unlabeled_rejected(small_corpus):
    index = load_manifest(small_corpus.manifest)
    models = extract_index(index.filter(lambda e: e.micro_dataset_id == "md000"))
    models[0] = ExtractedModel(models[0].model_id, models[0].topology, models[0].features, None, "md000")
    with pytest.raises(UnlabeledSnapshot):
        tables_from_models(models)


def test_inconsistent_topology():
    rng = np.random.default_rng(7)

    def model(n_layers, name):
        snap = random_snapshot(rng, n_layers=n_layers, r=2)
        return ExtractedModel(name, Topology.of(snap), tuple(extract_features(snap)), 1, "g")

    with pytest.raises(InconsistentTopology):
        tables_from_models([model(2, "a"), model(3, "b")])


def test_resolve_threads(monkeypatch):
    monkeypatch.setenv("LORA_FORENSICS_THREADS", "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2
    monkeypatch.delenv("LORA_FORENSICS_THREADS")
    assert resolve_threads(None) >= 1


def test_feature_cache_round_trip(tmp_path):
    feats = extract_features(random_snapshot(np.random.default_rng(8), n_layers=3, r=2), ALL)
    write_feature_cache(tmp_path / "f.safetensors", feats)
    back = read_feature_cache(tmp_path / "f.safetensors")
    assert [s for s, _ in back] == [s for s, _ in feats]
    assert all(a[1].tobytes() == b[1].tobytes() for a, b in zip(back, feats))


def test_feature_cache_rejects_foreign_keys(tmp_path):
    write_container(tmp_path / "x", [TensorRecord.from_array("weight", np.ones(2), "F64")])
    with pytest.raises(MalformedHeader):
        read_feature_cache(tmp_path / "x")
