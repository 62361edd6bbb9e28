import numpy as np
import pytest

from dare.dataio import (
    ALL_LABELS,
    GESTURE_LABELS,
    NULL_LABEL,
    POSE_LABELS,
    decode_image,
    encode_ppm,
    label_index,
    load_manifest,
    load_vectors,
    resize_image,
    save_vectors,
    synth_stereo_images,
    synth_vectors,
)
from dare.errors import (
    CorruptHeader,
    CountMismatch,
    ParseError,
    TruncatedPayload,
    UnknownLabel,
    UnsupportedFormat,
)
from dare.tensor import FeatureMap3


# ---------------------------------------------------------------------------
# taxonomy
# ---------------------------------------------------------------------------

def test_taxonomy_has_twenty_stable_labels():
    assert len(ALL_LABELS) == 20
    assert len(set(ALL_LABELS)) == 20
    assert len(GESTURE_LABELS) == 16
    assert len(POSE_LABELS) == 3
    assert ALL_LABELS[0] == "start"
    assert ALL_LABELS[16] == "turning-horizontally"
    assert ALL_LABELS[-1] == NULL_LABEL
    for i, name in enumerate(ALL_LABELS):
        assert label_index(name) == i


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def test_manifest_three_rows(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text(
        "left,right,label,location\n"
        "a_L.ppm,a_R.ppm,start,pool\n"
        "b_L.ppm,b_R.ppm,up,sea\n"
        "c_L.ppm,c_R.ppm,null,\n")
    manifest = load_manifest(path)
    assert len(manifest.samples) == 3
    assert manifest.samples[1].label == "up"
    assert manifest.total_images == 6


def test_manifest_unknown_label(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("left,right,label,location\na,b,jump,\n")
    with pytest.raises(UnknownLabel, match="jump"):
        load_manifest(path)


def test_manifest_bad_header(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("l,r,label\n")
    with pytest.raises(ParseError):
        load_manifest(path)


def test_manifest_caddy_shaped_counts(tmp_path):
    # 9239 gesture pairs spread over the 16 gestures, 12708 pose pairs over
    # the 3 poses, 7190 null pairs; 58274 images in total
    gesture_counts = {name: 9239 // 16 for name in GESTURE_LABELS}
    gesture_counts[GESTURE_LABELS[0]] += 9239 - sum(gesture_counts.values())
    pose_counts = {name: 12708 // 3 for name in POSE_LABELS}
    counts = {**gesture_counts, **pose_counts, NULL_LABEL: 7190}
    lines = ["left,right,label,location"]
    lines += [f"#expect {name}={count}" for name, count in counts.items()]
    for name, count in counts.items():
        lines += [f"{name}_{i}_L.ppm,{name}_{i}_R.ppm,{name},x" for i in range(count)]
    path = tmp_path / "caddy.csv"
    path.write_text("\n".join(lines) + "\n")
    manifest = load_manifest(path)
    assert sum(gesture_counts.values()) == 9239
    assert sum(pose_counts.values()) == 12708
    assert manifest.total_images == 2 * (9239 + 12708 + 7190) == 58274


def test_manifest_count_mismatch(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text(
        "left,right,label,location\n"
        "#expect start=2\n"
        "a,b,start,\n")
    with pytest.raises(CountMismatch):
        load_manifest(path)


def test_manifest_check_files(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("left,right,label,location\nmissing_L.ppm,missing_R.ppm,start,\n")
    load_manifest(path)  # fine without the check
    with pytest.raises(FileNotFoundError):
        load_manifest(path, check_files=True)


# ---------------------------------------------------------------------------
# PNM decode
# ---------------------------------------------------------------------------

def test_decode_single_red_pixel(tmp_path):
    path = tmp_path / "p.ppm"
    path.write_bytes(b"P6\n1 1\n255\n" + bytes([255, 0, 0]))
    img = decode_image(path)
    assert img.pixels.shape == (1, 1, 3)
    assert np.array_equal(img.pixels[0, 0], [1.0, 0.0, 0.0])


def test_decode_gray_replicates_channels(tmp_path):
    path = tmp_path / "p.pgm"
    path.write_bytes(b"P5\n2 1\n255\n" + bytes([128, 0]))
    img = decode_image(path)
    assert img.pixels.shape == (1, 2, 3)
    expect = 128 / 255
    assert np.allclose(img.pixels[0, 0], [expect] * 3, atol=1e-15)
    assert expect == pytest.approx(0.50196, abs=1e-5)


def test_decode_header_comments(tmp_path):
    path = tmp_path / "p.ppm"
    path.write_bytes(b"P6\n# a comment\n2 # inline\n1\n255\n" + bytes(range(6)))
    img = decode_image(path)
    assert img.pixels.shape == (1, 2, 3)


def test_decode_truncated_payload(tmp_path):
    path = tmp_path / "p.ppm"
    path.write_bytes(b"P6\n4 4\n255\n" + bytes(45))  # promises 48 pixels' bytes
    with pytest.raises(TruncatedPayload):
        decode_image(path)


def test_decode_rejects_other_formats(tmp_path):
    path = tmp_path / "p.ppm"
    path.write_bytes(b"P3\n1 1\n255\n255 0 0\n")
    with pytest.raises(UnsupportedFormat):
        decode_image(path)
    path.write_bytes(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")
    with pytest.raises(UnsupportedFormat):
        decode_image(path)
    path.write_bytes(b"P6\nx 1\n255\n\x00\x00\x00")
    with pytest.raises(CorruptHeader):
        decode_image(path)


def test_encode_decode_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    values = rng.integers(0, 256, size=(5, 7, 3))
    path = tmp_path / "p.ppm"
    encode_ppm(values / 255.0, path)
    img = decode_image(path)
    assert np.array_equal(img.pixels, values / 255.0)


# ---------------------------------------------------------------------------
# resize
# ---------------------------------------------------------------------------

def test_resize_same_size_is_identity():
    rng = np.random.default_rng(9)
    fm = FeatureMap3(rng.random((6, 6, 3)))
    out = resize_image(fm, 6)
    assert np.array_equal(out.data, fm.data)


def test_resize_preserves_constants():
    fm = FeatureMap3(np.full((5, 5, 3), 0.3))
    for target in (1, 2, 4, 9):
        out = resize_image(fm, target)
        assert np.allclose(out.data, 0.3, atol=1e-15)


def test_resize_gradient_hand_values():
    # horizontal gradient: pixel value = column / 3
    grad = np.zeros((4, 4, 3))
    for j in range(4):
        grad[:, j, :] = j / 3.0
    fm = FeatureMap3(grad)

    # down to 2x2: target coords map to source columns 0 and 3
    out = resize_image(fm, 2).data
    assert np.allclose(out[:, 0, :], 0.0, atol=1e-15)
    assert np.allclose(out[:, 1, :], 1.0, atol=1e-15)

    # down to 3x3: middle column reads source coordinate 1.5
    out = resize_image(fm, 3).data
    assert np.allclose(out[:, 0, :], 0.0, atol=1e-15)
    assert np.allclose(out[:, 1, :], 0.5, atol=1e-15)
    assert np.allclose(out[:, 2, :], 1.0, atol=1e-15)


def test_resize_is_channel_separable():
    rng = np.random.default_rng(10)
    pixels = np.zeros((8, 8, 3))
    pixels[:, :, 1] = rng.random((8, 8))
    out = resize_image(FeatureMap3(pixels), 5).data
    assert not out[:, :, 0].any()
    assert not out[:, :, 2].any()
    assert out[:, :, 1].any()


def test_resize_squares_rectangles(tmp_path):
    path = tmp_path / "r.ppm"
    rng = np.random.default_rng(11)
    encode_ppm(rng.random((4, 6, 3)), path)
    img = decode_image(path)
    out = resize_image(img, 5)
    assert out.side == 5 and out.depth == 3


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

def test_synth_vectors_separable_at_wide_margin():
    ds = synth_vectors(20, 50, 16, 4.0, 7)
    assert len(ds) == 1000 and ds.dim == 16
    assert ds.label_names == list(ALL_LABELS)
    centroids = np.stack([ds.features[ds.labels == c].mean(axis=0)
                          for c in range(20)])
    dist = ((ds.features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assert (dist.argmin(axis=1) == ds.labels).all()


def test_synth_vectors_margin_respected():
    for seed in (0, 1):
        ds = synth_vectors(10, 2, 8, 3.0, seed, noise=0.0)
        centroids = ds.features[::2]
        for i in range(10):
            for j in range(i + 1, 10):
                d = np.sqrt(((centroids[i] - centroids[j]) ** 2).sum())
                assert d >= 3.0 - 1e-9


def test_synth_vectors_deterministic():
    a = synth_vectors(5, 4, 8, 2.0, 123)
    b = synth_vectors(5, 4, 8, 2.0, 123)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)


def test_synth_images_right_is_shifted_left(tmp_path):
    manifest_path = synth_stereo_images(3, 2, 16, 5, tmp_path)
    manifest = load_manifest(manifest_path, check_files=True)
    assert len(manifest.samples) == 6
    for sample in manifest.samples:
        left = decode_image(tmp_path / sample.left).pixels
        right = decode_image(tmp_path / sample.right).pixels
        assert np.array_equal(right, np.roll(left, 1, axis=1))


def test_synth_images_deterministic(tmp_path):
    p1 = synth_stereo_images(2, 2, 12, 9, tmp_path / "a")
    p2 = synth_stereo_images(2, 2, 12, 9, tmp_path / "b")
    m1, m2 = load_manifest(p1), load_manifest(p2)
    for s1, s2 in zip(m1.samples, m2.samples):
        assert (tmp_path / "a" / s1.left).read_bytes() == \
            (tmp_path / "b" / s2.left).read_bytes()


def test_vector_file_round_trip(tmp_path):
    ds = synth_vectors(4, 6, 12, 2.0, 3)
    path = tmp_path / "d.dfmv"
    save_vectors(ds, path)
    back = load_vectors(path)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.labels, ds.labels)
    assert back.label_names == ds.label_names


def test_vector_file_rejects_garbage(tmp_path):
    path = tmp_path / "d.dfmv"
    path.write_bytes(b"NOPE1234")
    with pytest.raises(UnsupportedFormat):
        load_vectors(path)
    path.write_bytes(b"DFMV\x01\x00\x00")
    with pytest.raises(TruncatedPayload):
        load_vectors(path)
