"""Dataset parsing, synthetic corpora, and split construction."""

import gzip
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mubench.data import (
    Corpus,
    augment_batch,
    load_cifar,
    load_idx,
    make_splits,
    normalize_images,
    read_splits,
    synth_blobs,
    write_splits,
)
from mubench.errors import (
    BadMagic,
    CountMismatch,
    LabelOutOfRange,
    MubenchError,
    RowSizeMismatch,
    TooFewSamples,
    TruncatedFile,
)
from mubench.rng import stream


def idx_image_bytes(arr: np.ndarray) -> bytes:
    n, h, w = arr.shape
    return struct.pack(">IIII", 0x00000803, n, h, w) + arr.astype(np.uint8).tobytes()


def idx_label_bytes(vec) -> bytes:
    vec = np.asarray(vec, dtype=np.uint8)
    return struct.pack(">II", 0x00000801, len(vec)) + vec.tobytes()


@pytest.fixture
def idx_pair(tmp_path):
    gen = np.random.default_rng(0)
    imgs = gen.integers(0, 256, size=(7, 5, 4), dtype=np.uint8)
    labs = gen.integers(0, 10, size=7, dtype=np.uint8)
    ip, lp = tmp_path / "imgs.idx", tmp_path / "labs.idx"
    ip.write_bytes(idx_image_bytes(imgs))
    lp.write_bytes(idx_label_bytes(labs))
    return ip, lp, imgs, labs


class TestIdx:
    def test_round_trip(self, idx_pair):
        ip, lp, imgs, labs = idx_pair
        corpus = load_idx(ip, lp, class_count=10)
        assert corpus.images.shape == (7, 1, 5, 4)
        assert np.array_equal(corpus.images[:, 0] * 255.0, imgs.astype(np.float64))
        assert np.array_equal(corpus.labels, labs)
        assert corpus.class_count == 10

    def test_gzip_transparent(self, tmp_path, idx_pair):
        ip, lp, imgs, labs = idx_pair
        gip, glp = tmp_path / "imgs.gz", tmp_path / "labs.gz"
        gip.write_bytes(gzip.compress(ip.read_bytes()))
        glp.write_bytes(gzip.compress(lp.read_bytes()))
        a, b = load_idx(ip, lp), load_idx(gip, glp)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_class_count_inferred(self, idx_pair):
        ip, lp, _, labs = idx_pair
        assert load_idx(ip, lp).class_count == int(labs.max()) + 1

    def test_wrong_magic_kind(self, idx_pair):
        ip, lp, _, _ = idx_pair
        with pytest.raises(BadMagic):
            load_idx(lp, ip)

    def test_count_mismatch(self, tmp_path, idx_pair):
        ip, _, _, _ = idx_pair
        lp = tmp_path / "short.idx"
        lp.write_bytes(idx_label_bytes([1, 2, 3]))
        with pytest.raises(CountMismatch):
            load_idx(ip, lp)

    def test_truncated_payload(self, tmp_path, idx_pair):
        ip, lp, _, _ = idx_pair
        cut = tmp_path / "cut.idx"
        cut.write_bytes(ip.read_bytes()[:-1])
        with pytest.raises(TruncatedFile):
            load_idx(cut, lp)

    def test_truncated_header(self, tmp_path, idx_pair):
        _, lp, _, _ = idx_pair
        cut = tmp_path / "hdr.idx"
        cut.write_bytes(struct.pack(">I", 0x00000803) + b"\x00\x00")
        with pytest.raises(TruncatedFile):
            load_idx(cut, lp)

    def test_header_byte_fuzz(self, tmp_path, idx_pair):
        """Corrupting any single byte of the 16-byte image header must raise a
        typed error, never misparse silently."""
        ip, lp, imgs, _ = idx_pair
        raw = bytearray(ip.read_bytes())
        bad = tmp_path / "bad.idx"
        for pos in range(16):
            for delta in (0x01, 0x80, 0xFF):
                corrupted = bytearray(raw)
                corrupted[pos] ^= delta
                bad.write_bytes(bytes(corrupted))
                with pytest.raises((BadMagic, TruncatedFile, CountMismatch, MubenchError)):
                    load_idx(bad, lp)

    def test_label_header_byte_fuzz(self, tmp_path, idx_pair):
        ip, lp, _, _ = idx_pair
        raw = bytearray(lp.read_bytes())
        bad = tmp_path / "bad.idx"
        for pos in range(8):
            corrupted = bytearray(raw)
            corrupted[pos] ^= 0xFF
            bad.write_bytes(bytes(corrupted))
            with pytest.raises(MubenchError):
                load_idx(ip, bad)


def cifar_rows(gen, n, fine):
    row = 3074 if fine else 3073
    raw = gen.integers(0, 256, size=(n, row), dtype=np.uint8)
    raw[:, 0] = gen.integers(0, 20 if fine else 10, size=n)
    if fine:
        raw[:, 1] = gen.integers(0, 100, size=n)
    return raw


class TestCifar:
    def test_coarse_layout(self, tmp_path):
        gen = np.random.default_rng(1)
        raw = cifar_rows(gen, 5, fine=False)
        p = tmp_path / "batch.bin"
        p.write_bytes(raw.tobytes())
        corpus = load_cifar(p)
        assert corpus.images.shape == (5, 3, 32, 32)
        assert corpus.class_count == 10
        assert np.array_equal(corpus.labels, raw[:, 0])
        assert np.array_equal(corpus.images.reshape(5, -1) * 255.0, raw[:, 1:].astype(np.float64))

    def test_fine_label_offset(self, tmp_path):
        gen = np.random.default_rng(2)
        raw = cifar_rows(gen, 4, fine=True)
        p = tmp_path / "batch.bin"
        p.write_bytes(raw.tobytes())
        corpus = load_cifar(p, fine_labels=True)
        assert corpus.class_count == 100
        assert np.array_equal(corpus.labels, raw[:, 1])
        assert np.array_equal(corpus.images.reshape(4, -1) * 255.0, raw[:, 2:].astype(np.float64))

    def test_directory_of_batches_sorted(self, tmp_path):
        gen = np.random.default_rng(3)
        a, b = cifar_rows(gen, 3, False), cifar_rows(gen, 2, False)
        (tmp_path / "data_batch_2.bin").write_bytes(b.tobytes())
        (tmp_path / "data_batch_1.bin").write_bytes(a.tobytes())
        corpus = load_cifar(tmp_path)
        assert len(corpus) == 5
        assert np.array_equal(corpus.labels, np.concatenate([a[:, 0], b[:, 0]]))

    def test_row_size_mismatch(self, tmp_path):
        p = tmp_path / "batch.bin"
        p.write_bytes(b"\x00" * (3073 * 2 + 7))
        with pytest.raises(RowSizeMismatch):
            load_cifar(p)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "batch.bin"
        p.write_bytes(b"")
        with pytest.raises(TruncatedFile):
            load_cifar(p)

    def test_no_batches_in_dir(self, tmp_path):
        with pytest.raises(TruncatedFile):
            load_cifar(tmp_path)

    def test_gzip_batch(self, tmp_path):
        gen = np.random.default_rng(4)
        raw = cifar_rows(gen, 3, False)
        plain, packed = tmp_path / "a.bin", tmp_path / "a.gz"
        plain.write_bytes(raw.tobytes())
        packed.write_bytes(gzip.compress(raw.tobytes()))
        assert np.array_equal(load_cifar(plain).images, load_cifar(packed).images)


def flat_corpus(n, name="flat"):
    return Corpus(images=np.zeros((n, 1, 1, 1)), labels=np.zeros(n, dtype=np.int64), class_count=1, name=name)


class TestSplits:
    def test_mnist_sizes(self):
        split = make_splits(flat_corpus(60_000), flat_corpus(10_000), seed=123)
        assert split.sizes() == (45_900, 5_100, 9_000, 10_000)
        assert split.separate_test

    def test_cifar_sizes(self):
        split = make_splits(flat_corpus(50_000), flat_corpus(10_000), seed=123)
        assert split.sizes() == (38_250, 4_250, 7_500, 10_000)

    def test_desk_sizes_carved_test(self):
        split = make_splits(flat_corpus(4_000), seed=123)
        assert split.sizes() == (2_448, 272, 480, 800)
        assert not split.separate_test

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(40, 3000), seed=st.integers(0, 2**31 - 1))
    def test_partition_properties(self, n, seed):
        split = make_splits(flat_corpus(n), seed=seed)
        parts = [split.retain, split.forget, split.val, split.test]
        joined = np.concatenate(parts)
        assert len(np.unique(joined)) == len(joined) == n
        assert all(np.array_equal(p, np.sort(p)) for p in parts)
        n_test = math.floor(n * 0.20)
        pool = n - n_test
        n_val = math.floor(pool * 0.15)
        n_forget = math.floor((pool - n_val) * 0.10)
        assert split.sizes() == (pool - n_val - n_forget, n_forget, n_val, n_test)

    def test_separate_test_keeps_dev_whole(self):
        split = make_splits(flat_corpus(200), flat_corpus(50), seed=9)
        dev = np.concatenate([split.retain, split.forget, split.val])
        assert len(np.unique(dev)) == 200
        assert np.array_equal(split.test, np.arange(50))

    def test_deterministic_and_seed_sensitive(self):
        a = make_splits(flat_corpus(500), seed=123)
        b = make_splits(flat_corpus(500), seed=123)
        c = make_splits(flat_corpus(500), seed=124)
        assert np.array_equal(a.forget, b.forget) and np.array_equal(a.val, b.val)
        assert not np.array_equal(a.forget, c.forget)

    def test_empty_split_rejected(self):
        with pytest.raises(TooFewSamples):
            make_splits(flat_corpus(5), seed=0)
        with pytest.raises(TooFewSamples):
            make_splits(flat_corpus(0), seed=0)

    def test_round_trip_file(self, tmp_path):
        split = make_splits(flat_corpus(300), seed=77)
        p = tmp_path / "splits.txt"
        write_splits(split, p)
        back = read_splits(p)
        assert back.sizes() == split.sizes()
        for attr in ("retain", "forget", "val", "test"):
            assert np.array_equal(getattr(back, attr), getattr(split, attr))
        assert back.split_seed == 77
        assert back.separate_test == split.separate_test

    def test_read_rejects_other_files(self, tmp_path):
        p = tmp_path / "junk.txt"
        p.write_text("not a split file\n")
        with pytest.raises(BadMagic):
            read_splits(p)

    def test_read_rejects_missing_section(self, tmp_path):
        split = make_splits(flat_corpus(300), seed=77)
        p = tmp_path / "splits.txt"
        write_splits(split, p)
        lines = [ln for ln in p.read_text().splitlines() if not ln.startswith("val:")]
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(TruncatedFile):
            read_splits(p)


def centroid_accuracy(corpus) -> float:
    x = corpus.images.reshape(len(corpus), -1)
    y = corpus.labels
    half = len(y) // 2
    means = np.stack([x[:half][y[:half] == c].mean(axis=0) for c in range(corpus.class_count)])
    d = ((x[half:, None, :] - means[None]) ** 2).sum(axis=-1)
    return float((d.argmin(axis=1) == y[half:]).mean())


class TestBlobs:
    def test_shapes_and_range(self):
        c = synth_blobs(100, 10, dim=192, separation=3.0, seed=1)
        assert c.images.shape == (100, 3, 8, 8)
        assert 0.0 <= c.images.min() and c.images.max() <= 1.0
        assert synth_blobs(20, 4, dim=16, separation=1.0, seed=1).images.shape == (20, 1, 4, 4)
        assert synth_blobs(20, 4, dim=7, separation=1.0, seed=1).images.shape == (20, 1, 1, 7)

    def test_deterministic(self):
        a = synth_blobs(50, 5, dim=12, separation=2.0, seed=3)
        b = synth_blobs(50, 5, dim=12, separation=2.0, seed=3)
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
        c = synth_blobs(50, 5, dim=12, separation=2.0, seed=4)
        assert not np.array_equal(a.images, c.images)

    def test_label_balance(self):
        c = synth_blobs(1000, 10, dim=8, separation=1.0, seed=0)
        assert np.bincount(c.labels, minlength=10).tolist() == [100] * 10

    def test_separation_controls_difficulty(self):
        chance = centroid_accuracy(synth_blobs(1000, 10, dim=48, separation=0.0, seed=5))
        easy = centroid_accuracy(synth_blobs(1000, 10, dim=48, separation=8.0, seed=5))
        assert chance < 0.25
        assert easy > 0.95

    def test_too_few_samples(self):
        with pytest.raises(TooFewSamples):
            synth_blobs(5, 10, dim=8, separation=1.0, seed=0)

    def test_label_noise_flips_exact_fraction_to_wrong_classes(self):
        clean = synth_blobs(1000, 10, dim=12, separation=2.0, seed=9)
        noisy = synth_blobs(1000, 10, dim=12, separation=2.0, seed=9, label_noise=0.2)
        assert np.array_equal(clean.images, noisy.images)
        changed = clean.labels != noisy.labels
        assert changed.sum() == 200
        assert np.all(noisy.labels[changed] != clean.labels[changed])
        assert noisy.labels.min() >= 0 and noisy.labels.max() < 10

    def test_label_noise_deterministic(self):
        a = synth_blobs(300, 5, dim=12, separation=2.0, seed=3, label_noise=0.25)
        b = synth_blobs(300, 5, dim=12, separation=2.0, seed=3, label_noise=0.25)
        assert np.array_equal(a.labels, b.labels)

    def test_label_noise_rejects_bad_fraction(self):
        for bad in (-0.1, 1.0, 1.5):
            with pytest.raises(LabelOutOfRange):
                synth_blobs(100, 10, dim=8, separation=1.0, seed=0, label_noise=bad)


class TestTransforms:
    def test_normalize(self):
        imgs = np.full((2, 3, 2, 2), 0.5)
        out = normalize_images(imgs, mean=[0.5, 0.25, 0.0], std=[1.0, 0.5, 2.0])
        assert np.allclose(out[:, 0], 0.0) and np.allclose(out[:, 1], 0.5) and np.allclose(out[:, 2], 0.25)

    def test_normalize_channel_mismatch(self):
        with pytest.raises(CountMismatch):
            normalize_images(np.zeros((1, 3, 2, 2)), mean=[0.5], std=[1.0])

    def test_augment_deterministic_and_shape(self):
        gen = np.random.default_rng(8)
        imgs = gen.uniform(size=(6, 3, 8, 8))
        a = augment_batch(imgs, stream(0, "aug"))
        b = augment_batch(imgs, stream(0, "aug"))
        c = augment_batch(imgs, stream(1, "aug"))
        assert a.shape == imgs.shape
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_augment_values_come_from_padded_source(self):
        imgs = np.ones((3, 1, 4, 4))
        out = augment_batch(imgs, stream(2, "aug"), pad=2)
        assert set(np.unique(out)) <= {0.0, 1.0}
