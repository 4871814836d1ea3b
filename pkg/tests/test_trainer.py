import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lungquant.augment import AugmentationSpec
from lungquant.manifest import ManifestEntry, manifest_hash, write_manifest
from lungquant.model import UNetConfig, build_unet, load_checkpoint
from lungquant.phantom import generate_phantom
from lungquant.preprocess import LUNG_WINDOW
from lungquant.trainer import (
    SPLIT_60,
    SPLIT_90,
    SplitPlan,
    TrainConfig,
    TrainingError,
    assign_splits,
    evaluate_dice,
    largest_remainder,
    prepare_pair,
    split_dataset,
    train,
    train_cascade,
)
from lungquant.volume_io import save_mask, save_volume

TOY = UNetConfig(depth=3, base_channels=8, input_dims=(32, 32, 20))


def test_table_rows_and_rounding():
    assert largest_remainder(399, (0.8, 0.1, 0.1)) == [319, 40, 40]
    assert largest_remainder(91, (0.6, 0.2, 0.2)) == [55, 18, 18]
    assert largest_remainder(199, (0.9, 0.1, 0.0)) == [179, 20, 0]
    ids = [f"c{i}" for i in range(10)]
    assert [len(p) for p in split_dataset(ids, SPLIT_60)] == [6, 2, 2]


def test_split_deterministic_and_per_source():
    groups = {"a": [f"a{i}" for i in range(20)], "b": [f"b{i}" for i in range(10)]}
    s1, s2 = split_dataset(groups, SPLIT_60), split_dataset(groups, SPLIT_60)
    assert s1 == s2
    assert sum(i.startswith("a") for i in s1[0]) == 12 and sum(i.startswith("b") for i in s1[0]) == 6
    assert split_dataset(groups, SplitPlan(seed=1)) != s1


def test_split_errors():
    with pytest.raises(ValueError):
        split_dataset({"a": []})
    with pytest.raises(ValueError):
        split_dataset({"a": ["x"], "b": ["x"]})
    with pytest.raises(ValueError):
        SplitPlan((0.5, 0.2, 0.2))


@settings(max_examples=30)
@given(st.dictionaries(st.sampled_from("abcd"), st.integers(1, 40), min_size=1), st.integers(0, 99))
def test_split_partitions(sizes, seed):
    groups = {src: [f"{src}{i}" for i in range(n)] for src, n in sizes.items()}
    parts = split_dataset(groups, SplitPlan((0.6, 0.2, 0.2), seed))
    flat = [i for p in parts for i in p]
    assert sorted(flat) == sorted(i for ids in groups.values() for i in ids)
    assert len(set(flat)) == len(flat)


def test_config_round_trip_and_validation():
    cfg = TrainConfig(epochs=3, loss="dice+wce", unet=TOY, augmentation=AugmentationSpec(factor=1), split=SPLIT_90)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    for bad in ({"epochs": 0}, {"loss": "focal"}, {"batch_size": 0}, {"nonsense": 1}):
        with pytest.raises(ValueError):
            TrainConfig.from_dict(bad)


def phantom_pairs(n, fraction=0.0, target="lung", offset=0):
    out = []
    for i in range(n):
        p = generate_phantom(100 + offset + i, fraction)
        out.append(prepare_pair(p.volume.voxels, getattr(p, target).voxels, LUNG_WINDOW, TOY.input_dims))
    return out


@pytest.fixture(scope="module")
def two_phantoms():
    return phantom_pairs(2)


def test_overfit_two_phantoms(two_phantoms, tmp_path):
    cfg = TrainConfig(epochs=200, learning_rate=2e-3, batch_size=2, unet=TOY, early_stop_dice=0.95)
    model, hist = train(build_unet(TOY, seed=0), two_phantoms, two_phantoms, cfg, history_path=tmp_path / "h.jsonl")
    assert min(evaluate_dice(model, two_phantoms)) >= 0.9
    losses = [r["train_loss"] for r in hist.records]
    assert losses[-1] < 0.25 * losses[0]
    lines = (tmp_path / "h.jsonl").read_text().splitlines()
    assert len(lines) == len(hist.records) and json.loads(lines[0])["epoch"] == 1
    best = max(r["val_dice"] for r in hist.records)
    assert hist.best_val_dice == best
    assert np.mean(evaluate_dice(model, two_phantoms)) == pytest.approx(best)
    assert best >= hist.records[-1]["val_dice"]


def test_no_validation_keeps_last_epoch(two_phantoms):
    cfg = TrainConfig(epochs=2, learning_rate=1e-3, batch_size=2, unet=TOY)
    _, hist = train(build_unet(TOY, seed=0), two_phantoms, [], cfg)
    assert hist.best_epoch == 2 and hist.warnings


def test_same_seed_same_first_epoch(two_phantoms):
    cfg = TrainConfig(epochs=1, learning_rate=1e-3, batch_size=1, unet=TOY, seed=3)
    a = train(build_unet(TOY, seed=3), two_phantoms, [], cfg)[1].records[0]["train_loss"]
    b = train(build_unet(TOY, seed=3), two_phantoms, [], cfg)[1].records[0]["train_loss"]
    assert a == b


def test_non_finite_loss_aborts(two_phantoms):
    img, m = two_phantoms[0]
    bad = img.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train(build_unet(TOY, seed=0), [(bad, m)], [], TrainConfig(epochs=1, unet=TOY))
    with pytest.raises(TrainingError):
        train(build_unet(TOY, seed=0), [], [], TrainConfig(epochs=1, unet=TOY))


def write_corpus(root, n=4, fractions=(0.1, 0.3)):
    entries = []
    for i in range(n):
        p = generate_phantom(200 + i, fractions[i % len(fractions)])
        paths = [root / f"p{i}_{k}.nii.gz" for k in ("img", "lung", "lesion")]
        save_volume(p.volume, paths[0])
        save_mask(p.lung, paths[1])
        save_mask(p.lesion, paths[2])
        entries.append(ManifestEntry(f"p{i}", *map(str, paths), source_dataset="phantom"))
    return entries


def test_assign_splits_respects_explicit_field(tmp_path):
    entries = [ManifestEntry(f"c{i}", "x") for i in range(10)]
    entries[0].extra["split"] = "test"
    s = assign_splits(entries, SPLIT_60)
    assert entries[0] in s["test"] and sum(map(len, s.values())) == 10


def test_cascade_smoke_both_box_paths(tmp_path, monkeypatch):
    monkeypatch.setenv("LUNGQUANT_CACHE", str(tmp_path / "cache"))
    entries = write_corpus(tmp_path)
    small = UNetConfig(depth=2, base_channels=2, input_dims=(16, 16, 10))
    cfg1 = TrainConfig(epochs=1, unet=small, augmentation=AugmentationSpec(factor=0), split=SplitPlan((0.5, 0.5, 0.0)))
    cfg2 = TrainConfig(epochs=1, loss="dice+wce", unet=small, augmentation=AugmentationSpec(factor=1), split=SplitPlan((0.5, 0.5, 0.0)))
    for ref in (True, False):
        out = tmp_path / f"run_{ref}"
        (u1, h1), (u2, h2) = train_cascade(entries, cfg1, cfg2, out, use_reference_lungs=ref)
        for name in ("unet1", "unet2"):
            assert (out / f"{name}.pt").exists() and (out / f"{name}.json").exists()
            assert (out / f"{name}_history.jsonl").exists()
        _, info = load_checkpoint(out / "unet2.pt")
        assert info.extra["box_source"] == ("reference" if ref else "unet1")
        assert info.extra["manifest_sha256"] == manifest_hash(entries)
        assert "class_weights" in info.extra
    assert any((tmp_path / "cache").glob("*.npz"))


def test_manifest_hash_deterministic(tmp_path):
    entries = [ManifestEntry("a", "/x/a.nii.gz"), ManifestEntry("b", "/x/b.nii.gz")]
    assert manifest_hash(entries) == manifest_hash(list(entries))
    write_manifest(entries, tmp_path / "m.json")
