import numpy as np
import pytest

from alignedvq import containers, vq
from alignedvq.data import DataConfig, generate
from alignedvq.dlp import AlignedVQModule
from alignedvq.encoder import ModelConfig, PartitionSpec, VisionEncoder


def test_codebook_container_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    cbs = [vq.Codebook(rng.normal(size=(8, 4)).astype(np.float32)) for _ in range(3)]
    path = tmp_path / "cb.avqcb"
    containers.save_codebooks(path, cbs)
    raw = path.read_bytes()
    assert raw.startswith(b"AVQCB01")
    loaded = containers.load_codebooks(path)
    assert len(loaded) == 3
    for a, b in zip(cbs, loaded):
        assert a.centroids.tobytes() == b.centroids.tobytes()
        assert a.content_hash == b.content_hash


def test_codebook_container_detects_corruption(tmp_path):
    cbs = [vq.Codebook(np.random.default_rng(1).normal(size=(4, 2)).astype(np.float32))]
    path = tmp_path / "cb.avqcb"
    containers.save_codebooks(path, cbs)
    raw = bytearray(path.read_bytes())
    raw[20] ^= 0xFF  # flip a centroid byte
    path.write_bytes(bytes(raw))
    with pytest.raises(containers.ContainerError):
        containers.load_codebooks(path)


def test_codebook_container_rejects_bad_magic(tmp_path):
    path = tmp_path / "cb.avqcb"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(containers.ContainerError):
        containers.load_codebooks(path)


def test_section_container_round_trip(tmp_path):
    path = tmp_path / "x.avq"
    sections = {"a": np.arange(6, dtype=np.float32), "b.c": np.zeros(1, dtype=np.float32)}
    containers.write_sections(path, sections)
    assert path.read_bytes().startswith(b"AVQCKPT1")
    loaded = containers.read_sections(path)
    assert set(loaded) == {"a", "b.c"}
    np.testing.assert_array_equal(loaded["a"], sections["a"])


def test_section_container_rejects_truncation(tmp_path):
    path = tmp_path / "x.avq"
    containers.write_sections(path, {"a": np.arange(6, dtype=np.float32)})
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(containers.ContainerError):
        containers.read_sections(path)


def test_plain_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(image_size=16, patch_size=8, embed_dim=16, depth=2, heads=2,
                      num_classes=4, seed=3)
    model = VisionEncoder(cfg)
    model.add_adapter(rank=2, alpha=4.0, seed=1)
    path = tmp_path / "model.avq"
    containers.save_checkpoint(path, model)
    bundle = containers.load_checkpoint(path)
    assert bundle.model.cfg == cfg
    assert bundle.vq_module is None
    img = np.random.default_rng(2).normal(size=(2, 16, 16, 1)).astype(np.float32)
    a = model.forward(img).logits.value
    b = bundle.model.forward(img).logits.value
    assert a.tobytes() == b.tobytes()


def test_vq_checkpoint_round_trip_with_codebooks(tmp_path):
    cfg = ModelConfig(image_size=16, patch_size=8, embed_dim=16, depth=2, heads=2,
                      num_classes=4, seed=4)
    model = VisionEncoder(cfg)
    part = PartitionSpec(1, "LN2")
    rng = np.random.default_rng(5)
    vcfg = vq.VQConfig(2, 2, 8, 16)
    cbs = [vq.Codebook(rng.normal(size=(8, 8)).astype(np.float32))
           for _ in range(vcfg.total_codebooks)]
    module = AlignedVQModule.initialize(vcfg, seed=6, codebooks=cbs)
    module.dlp.gamma_in.value = np.asarray(0.37, dtype=np.float32)

    ck = tmp_path / "model.avq"
    cb_path = tmp_path / "model.avqcb"
    containers.save_checkpoint(ck, model, part, module)
    containers.save_codebooks(cb_path, cbs)

    bundle = containers.load_checkpoint(ck)
    assert bundle.partition == part
    assert bundle.vq_module.vq_config == vcfg
    assert float(bundle.vq_module.dlp.gamma_in.value) == np.float32(0.37)
    assert bundle.codebook_hashes == [cb.content_hash for cb in cbs]
    bundle.attach_codebooks(containers.load_codebooks(cb_path))

    img = rng.normal(size=(3, 16, 16, 1)).astype(np.float32)
    a = model.forward(img, part, module).logits.value
    b = bundle.model.forward(img, bundle.partition, bundle.vq_module).logits.value
    assert a.tobytes() == b.tobytes()


def test_attach_rejects_wrong_codebooks(tmp_path):
    cfg = ModelConfig(image_size=16, patch_size=8, embed_dim=16, depth=1, heads=2,
                      num_classes=4)
    model = VisionEncoder(cfg)
    rng = np.random.default_rng(7)
    vcfg = vq.VQConfig(1, 1, 8, 16)
    cbs = [vq.Codebook(rng.normal(size=(8, 16)).astype(np.float32))]
    module = AlignedVQModule.initialize(vcfg, seed=0, codebooks=cbs)
    ck = tmp_path / "m.avq"
    containers.save_checkpoint(ck, model, PartitionSpec(0, "LN1"), module)
    bundle = containers.load_checkpoint(ck)
    wrong = [vq.Codebook(rng.normal(size=(8, 16)).astype(np.float32))]
    with pytest.raises(containers.ContainerError):
        bundle.attach_codebooks(wrong)


def test_hash_limb_round_trip_extremes():
    for h in (0, 1, 0xFFFF_FFFF_FFFF_FFFF, 0x8000_0000_0000_0001, 0x0123_4567_89AB_CDEF):
        limbs = np.array(containers._hash_to_limbs(h), dtype=np.float32)
        assert containers._limbs_to_hash(limbs) == h


def test_dataset_shard_round_trip(tmp_path):
    ds = generate(DataConfig(num_classes=3, samples_per_class=10, seed=9))
    path = tmp_path / "data.avq"
    containers.save_dataset(path, ds)
    loaded = containers.load_dataset(path)
    # meta floats round through float32 in the shard
    assert loaded.config.noise_sigma == pytest.approx(ds.config.noise_sigma)
    assert (loaded.config.num_classes, loaded.config.samples_per_class,
            loaded.config.image_size, loaded.config.seed) == (3, 10, 32, 9)
    assert loaded.images.tobytes() == ds.images.tobytes()
    np.testing.assert_array_equal(loaded.labels, ds.labels)
    np.testing.assert_array_equal(loaded.train_idx, ds.train_idx)
    np.testing.assert_array_equal(loaded.val_idx, ds.val_idx)
