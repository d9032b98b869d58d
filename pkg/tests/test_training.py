"""Dataset plumbing and the NLL training loop."""

import numpy as np
import pytest

from stegflow import autodiff as ad
from stegflow import training as tr
from stegflow.errors import ConfigError, DataError, TrainingDiverged
from stegflow.flow import FlowConfig, FlowModel, to_domain
from stegflow.training import (
    Dataset,
    TrainConfig,
    bits_per_dim,
    ingest_images,
    synth_dataset,
    train,
    write_loss_curve,
)


def tiny_model(seed=0):
    return FlowModel(FlowConfig(height=8, width=8, levels=2, steps=2), init_seed=seed)


def tiny_dataset(seed=7, n=160):
    return synth_dataset(seed=seed, n=n, dims=(8, 8), eval_fraction=0.2)


# -- Dataset validation -----------------------------------------------------------


def test_dataset_rejects_empty():
    with pytest.raises(DataError, match="empty"):
        Dataset(images=[], tags=[], source="t")


def test_dataset_rejects_tag_count_mismatch():
    img = np.zeros((8, 8, 3), dtype=np.float32)
    with pytest.raises(DataError, match="split tags"):
        Dataset(images=[img, img], tags=["train"], source="t")


def test_dataset_rejects_unknown_tag():
    img = np.zeros((8, 8, 3), dtype=np.float32)
    with pytest.raises(DataError, match="holdout"):
        Dataset(images=[img], tags=["holdout"], source="t")


def test_dataset_rejects_mixed_dims_naming_offender():
    a = np.zeros((8, 8, 3), dtype=np.float32)
    b = np.zeros((16, 16, 3), dtype=np.float32)
    with pytest.raises(DataError, match="image 1"):
        Dataset(images=[a, b], tags=["train", "train"], source="t")


def test_dataset_rejects_out_of_range_pixels():
    img = np.full((8, 8, 3), 300.0, dtype=np.float32)
    with pytest.raises(DataError, match=r"\[0, 255\]"):
        Dataset(images=[img], tags=["train"], source="t")


# -- synth_dataset ------------------------------------------------------------------


def test_synth_dataset_is_deterministic():
    a = synth_dataset(seed=7, n=16, dims=(8, 8))
    b = synth_dataset(seed=7, n=16, dims=(8, 8))
    assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))
    assert a.tags == b.tags


def test_synth_dataset_seed_256_count():
    ds = synth_dataset(seed=7, n=256, dims=(8, 8))
    assert len(ds.images) == 256


def test_synth_images_are_nonconstant():
    ds = synth_dataset(seed=3, n=8, dims=(8, 8))
    for im in ds.images:
        for c in range(3):
            assert im[:, :, c].var() > 0


def test_synth_histogram_spans_100_values():
    ds = synth_dataset(seed=5, n=64, dims=(8, 8))
    values = np.unique(np.concatenate([im.reshape(-1) for im in ds.images]))
    assert values.size >= 100


def test_synth_rejects_bad_n():
    with pytest.raises(ConfigError):
        synth_dataset(seed=0, n=0, dims=(8, 8))


# -- ingest_images --------------------------------------------------------------------


def _write_png(path, arr):
    from PIL import Image

    Image.fromarray(arr.astype(np.uint8), mode="RGB").save(path)


def test_ingest_reads_directory_in_filename_order(tmp_path):
    rng = np.random.default_rng(0)
    for name in ("b.png", "a.png", "c.png"):
        _write_png(tmp_path / name, rng.integers(0, 256, (8, 8, 3)))
    ds = ingest_images(str(tmp_path))
    assert len(ds.images) == 3
    again = ingest_images(str(tmp_path))
    assert all(np.array_equal(x, y) for x, y in zip(ds.images, again.images))


def test_ingest_empty_directory_errors(tmp_path):
    with pytest.raises(DataError, match="no raster images"):
        ingest_images(str(tmp_path))


def test_ingest_mixed_sizes_names_offender(tmp_path):
    rng = np.random.default_rng(1)
    _write_png(tmp_path / "a.png", rng.integers(0, 256, (8, 8, 3)))
    _write_png(tmp_path / "b.png", rng.integers(0, 256, (16, 16, 3)))
    with pytest.raises(DataError, match="b.png"):
        ingest_images(str(tmp_path))


def test_ingest_unreadable_file_names_offender(tmp_path):
    (tmp_path / "broken.png").write_bytes(b"not a png at all")
    with pytest.raises(DataError, match="broken.png"):
        ingest_images(str(tmp_path))


# -- TrainConfig -----------------------------------------------------------------------


def test_train_config_rejects_nonpositive():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=-1)


# -- train -------------------------------------------------------------------------------


def test_zero_epochs_leaves_parameters_unchanged():
    model = tiny_model()
    before = [p.data.copy() for _, p in model.parameters()]
    result = train(model, tiny_dataset(), TrainConfig(epochs=0))
    after = [p.data for _, p in model.parameters()]
    assert all(np.array_equal(a, b) for a, b in zip(before, after))
    assert result.curve == []


def test_loss_curve_length_is_epochs_times_batches():
    model = tiny_model()
    ds = tiny_dataset(n=160)  # 128 train at batch 32 -> 4 batches/epoch
    result = train(model, ds, TrainConfig(epochs=3, batch_size=32, checkpoint_interval=100))
    assert len(result.curve) == 3 * 4
    assert result.curve[0][:2] == (0, 0)
    assert result.curve[-1][:2] == (2, 3)


def test_eval_bpd_drops_at_least_half_bit():
    model = tiny_model()
    result = train(model, tiny_dataset(), TrainConfig(epochs=6, checkpoint_interval=100))
    assert result.initial_eval_bpd - result.final_eval_bpd >= 0.5


def test_bijectivity_preserved_during_and_after_training():
    model = tiny_model()
    ds = tiny_dataset()
    x = to_domain(ds.split("eval"))

    def roundtrip_err():
        latents, _ = model.forward(x)
        return float(np.max(np.abs(model.inverse(latents) - x)))

    assert roundtrip_err() < 1e-4  # before
    train(model, ds, TrainConfig(epochs=1, checkpoint_interval=100))
    assert roundtrip_err() < 1e-4  # during (one epoch in)
    train(model, ds, TrainConfig(epochs=5, checkpoint_interval=100))
    assert roundtrip_err() < 1e-4  # after


def test_eval_bpd_finite_after_training():
    model = tiny_model()
    ds = tiny_dataset()
    train(model, ds, TrainConfig(epochs=4, checkpoint_interval=100))
    bpd = bits_per_dim(model, to_domain(ds.split("eval")))
    assert np.all(np.isfinite(bpd))


def test_training_is_reproducible_bytewise(tmp_path):
    cfg = TrainConfig(epochs=3, seed=11, checkpoint_interval=100)
    paths = []
    for tag in ("x", "y"):
        model = tiny_model(seed=0)
        train(model, tiny_dataset(), cfg)
        path = tmp_path / f"{tag}.ckpt"
        model.save(str(path))
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_checkpoints_written_at_interval(tmp_path):
    model = tiny_model()
    result = train(model, tiny_dataset(), TrainConfig(epochs=4, checkpoint_interval=2),
                   checkpoint_dir=str(tmp_path))
    names = [p.split("/")[-1] for p in result.checkpoints]
    assert names == ["checkpoint-epoch0001.ckpt", "checkpoint-epoch0003.ckpt"]
    reloaded = FlowModel.load(result.last_checkpoint)
    assert reloaded.config == model.config


def test_nan_loss_aborts_keeping_last_good_checkpoint(tmp_path, monkeypatch):
    model = tiny_model()
    real = tr._nll_bits
    calls = {"n": 0}

    def poisoned(m, batch):
        calls["n"] += 1
        if calls["n"] > 6:  # past the first full epoch (4 batches)
            return ad.tensor(np.float32(np.nan))
        return real(m, batch)

    monkeypatch.setattr(tr, "_nll_bits", poisoned)
    with pytest.raises(TrainingDiverged, match="checkpoint-epoch0000.ckpt"):
        train(model, tiny_dataset(), TrainConfig(epochs=3, checkpoint_interval=1),
              checkpoint_dir=str(tmp_path))
    survivor = tmp_path / "checkpoint-epoch0000.ckpt"
    assert survivor.exists()
    FlowModel.load(str(survivor))  # still a valid checkpoint


def test_train_rejects_mismatched_dims():
    model = FlowModel(FlowConfig(height=16, width=16, levels=2, steps=1))
    with pytest.raises(DataError, match="dims"):
        train(model, tiny_dataset(), TrainConfig(epochs=1))


# -- loss curve CSV -------------------------------------------------------------------


def test_write_loss_curve_deterministic(tmp_path):
    curve = [(0, 0, 1.25), (0, 1, 1.0 / 3.0)]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_loss_curve(str(a), curve)
    write_loss_curve(str(b), curve)
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().strip().split("\n")
    assert lines[0] == "epoch,step,nll_bits_per_dim"
    assert lines[1] == "0,0,1.250000"
