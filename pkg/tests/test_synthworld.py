import numpy as np
import pytest

from pixelalign.synthworld import (
    BACKGROUND_U8,
    AlignedSample,
    DatasetFormatError,
    PlacementError,
    Scene,
    SceneObject,
    WorldConfig,
    generate_dataset,
    generate_scene,
    grammar_words,
    make_augmenter,
    make_referring,
    make_sample,
    narrate_object,
    narrate_scene,
    object_caption_from_query,
    read_dataset,
    read_ppm,
    render_scene,
    sample_mode,
    write_dataset,
    write_ppm,
)

BG = np.float32(BACKGROUND_U8) / np.float32(255.0)


def scene_of(objects):
    return Scene(width=64, height=64, objects=objects, rng_seed=0)


def two_object_scene():
    return scene_of([
        SceneObject(shape="circle", color="red", box=(8.0, 8.0, 24.0, 24.0)),
        SceneObject(shape="square", color="blue", box=(40.0, 40.0, 56.0, 56.0)),
    ])


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def test_generate_scene_is_deterministic(world):
    a = generate_scene(5, world)
    b = generate_scene(5, world)
    assert [o.box for o in a.objects] == [o.box for o in b.objects]
    assert [(o.color, o.shape) for o in a.objects] == [(o.color, o.shape) for o in b.objects]


def test_generate_scene_orders_objects_left_to_right(world):
    for seed in range(30):
        scene = generate_scene(seed, world)
        centers = [o.center for o in scene.objects]
        assert centers == sorted(centers)


def test_generate_scene_respects_bounds_and_distinct_combos(world):
    for seed in range(20):
        scene = generate_scene(seed, world)
        combos = [(o.color, o.shape) for o in scene.objects]
        assert len(set(combos)) == len(combos)
        for o in scene.objects:
            assert 0 <= o.box[0] < o.box[2] <= world.size
            assert 0 <= o.box[1] < o.box[3] <= world.size
            assert world.min_size <= o.box[2] - o.box[0] <= world.max_size


def test_generate_scene_raises_when_placement_impossible():
    # two 20 px objects plus a 2 px gap cannot fit in a 32 px image
    cfg = WorldConfig(size=32, min_objects=2, max_objects=2, min_size=20, max_size=20,
                      max_retries=50)
    with pytest.raises(PlacementError):
        generate_scene(0, cfg)


def test_world_config_validation():
    with pytest.raises(ValueError):
        WorldConfig(size=48)
    with pytest.raises(ValueError):
        WorldConfig(min_objects=0)
    with pytest.raises(ValueError):
        WorldConfig(min_size=4)
    with pytest.raises(ValueError):
        WorldConfig(min_size=30, max_size=20)


def test_scene_rejects_overlapping_boxes():
    with pytest.raises(ValueError):
        scene_of([
            SceneObject(shape="circle", color="red", box=(8.0, 8.0, 24.0, 24.0)),
            SceneObject(shape="square", color="blue", box=(16.0, 16.0, 32.0, 32.0)),
        ])


# ---------------------------------------------------------------------------
# rendering (hand-computed rasterization oracles)
# ---------------------------------------------------------------------------

def test_render_square_fills_exact_pixel_range():
    scene = scene_of([SceneObject(shape="square", color="red", box=(8.0, 8.0, 24.0, 24.0))])
    img = render_scene(scene)
    assert img.dtype == np.float32 and img.shape == (64, 64, 3)
    # pixel centers at col 8 (8.5 >= 8) through col 23 (23.5 <= 24) are inside;
    # col 24 has center 24.5 > 24 and stays background
    assert np.array_equal(img[10, 8], [1.0, 0.0, 0.0])
    assert np.array_equal(img[10, 23], [1.0, 0.0, 0.0])
    assert np.allclose(img[10, 24], BG)
    assert np.allclose(img[7, 10], BG)
    red_cols = np.nonzero(img[10, :, 0] == 1.0)[0]
    assert red_cols.min() == 8 and red_cols.max() == 23


def test_render_circle_radius_boundary():
    scene = scene_of([SceneObject(shape="circle", color="green", box=(24.0, 24.0, 40.0, 40.0))])
    img = render_scene(scene)
    # center (32, 32), radius 8: pixel (39, 32) center distance 7.5 is inside,
    # pixel (40, 32) center distance 8.5 is outside
    assert np.array_equal(img[39, 32], [0.0, 1.0, 0.0])
    assert np.allclose(img[40, 32], BG)
    assert np.array_equal(img[32, 32], [0.0, 1.0, 0.0])


def test_render_triangle_narrows_toward_apex():
    scene = scene_of([SceneObject(shape="triangle", color="blue", box=(8.0, 8.0, 24.0, 24.0))])
    img = render_scene(scene)
    blue = img[:, :, 2] == 1.0
    # row 8: t = 0.03125 allows half-width 0.25 around x = 16 -> no pixel centers
    assert not blue[8].any()
    # row 9: half-width 0.75 covers exactly columns 15 and 16
    assert set(np.nonzero(blue[9])[0].tolist()) == {15, 16}
    # base row 23: half-width 7.75 covers columns 8..23
    assert set(np.nonzero(blue[23])[0].tolist()) == set(range(8, 24))
    assert not blue[24].any()


def test_render_background_is_mid_gray():
    scene = scene_of([SceneObject(shape="square", color="red", box=(0.0, 0.0, 10.0, 10.0))])
    img = render_scene(scene)
    assert np.allclose(img[63, 63], BG)


# ---------------------------------------------------------------------------
# narration
# ---------------------------------------------------------------------------

def test_narrate_two_object_scene_words_and_anchors(vocab):
    tokens, trace, mask = narrate_scene(two_object_scene(), vocab, "dense")
    assert vocab.decode(tokens) == "a red circle left of a blue square ."
    assert trace.shape == (9, 4)
    # "red" anchors at the first object's center (16, 16): segment +/- 2 px
    assert np.allclose(trace[1], [14 / 64, 14 / 64, 18 / 64, 18 / 64])
    # relation words anchor at the midpoint of the centers (32, 32)
    assert np.allclose(trace[3], [30 / 64, 30 / 64, 34 / 64, 34 / 64])
    assert np.allclose(trace[4], trace[3])
    # "square" anchors at the second object's center (48, 48)
    assert np.allclose(trace[7], [46 / 64, 46 / 64, 50 / 64, 50 / 64])
    # the period anchors at the image center
    assert np.allclose(trace[8], [30 / 64, 30 / 64, 34 / 64, 34 / 64])
    assert mask.tolist() == [True] * 8 + [False]


def test_narrate_sparse_mask_covers_only_nouns(vocab):
    tokens, _, mask = narrate_scene(two_object_scene(), vocab, "sparse")
    words = vocab.decode(tokens).split()
    expected = [w in ("red", "blue", "circle", "square") for w in words]
    assert mask.tolist() == expected


def test_narrate_vertical_relation(vocab):
    scene = scene_of([
        SceneObject(shape="circle", color="red", box=(10.0, 40.0, 26.0, 56.0)),
        SceneObject(shape="square", color="blue", box=(12.0, 4.0, 28.0, 20.0)),
    ])
    tokens, _, _ = narrate_scene(scene, vocab, "dense")
    # first object sits lower (larger y) with nearly equal x -> "below"
    assert vocab.decode(tokens) == "a red circle below a blue square ."


def test_narrate_ties_go_to_the_horizontal_axis(vocab):
    # |dx| == |dy| must read as left/right, not above/below
    scene = scene_of([
        SceneObject(shape="circle", color="red", box=(0.0, 0.0, 16.0, 16.0)),
        SceneObject(shape="square", color="blue", box=(30.0, 30.0, 46.0, 46.0)),
    ])
    tokens, _, _ = narrate_scene(scene, vocab, "dense")
    assert "left of" in vocab.decode(tokens)


def test_narrate_single_object_scene(vocab):
    scene = scene_of([SceneObject(shape="circle", color="red", box=(8.0, 8.0, 24.0, 24.0))])
    tokens, trace, mask = narrate_scene(scene, vocab, "dense")
    assert vocab.decode(tokens) == "a red circle ."
    assert trace.shape == (4, 4)
    assert mask.tolist() == [True, True, True, False]


def test_narrate_rejects_unknown_mode(vocab):
    with pytest.raises(ValueError):
        narrate_scene(two_object_scene(), vocab, "best-effort")


def test_narrate_object_is_a_single_object_phrase(vocab):
    tokens, trace, mask = narrate_object(two_object_scene(), 1, vocab)
    assert vocab.decode(tokens) == "a blue square ."
    assert np.allclose(trace[0], [46 / 64, 46 / 64, 50 / 64, 50 / 64])
    assert mask.tolist() == [True, True, True, False]


def test_make_referring_queries(vocab):
    queries = make_referring(two_object_scene(), vocab)
    assert len(queries) == 2
    assert vocab.decode(queries[0][0]) == "the red circle"
    assert queries[0][1] == 0 and queries[1][1] == 1


def test_object_caption_from_query_roundtrip(vocab):
    q = vocab.encode("the blue square")
    assert vocab.decode(object_caption_from_query(q, vocab)) == "a blue square ."
    with pytest.raises(ValueError):
        object_caption_from_query(vocab.encode("a blue square"), vocab)


def test_grammar_words_cover_generated_captions(vocab, world):
    allowed = set(grammar_words())
    for seed in range(10):
        tokens, _, _ = narrate_scene(generate_scene(seed, world), vocab, "dense")
        assert set(vocab.decode(tokens).split()) <= allowed


# ---------------------------------------------------------------------------
# samples and augmentation
# ---------------------------------------------------------------------------

def test_make_sample_boxes_are_normalized(vocab):
    s = make_sample(two_object_scene(), vocab, "dense")
    assert np.allclose(s.boxes[0], [8 / 64, 8 / 64, 24 / 64, 24 / 64])
    assert s.image.shape == (64, 64, 3)
    assert sample_mode(s) == "dense"
    assert sample_mode(make_sample(two_object_scene(), vocab, "sparse")) == "sparse"


def test_aligned_sample_validates_alignment():
    with pytest.raises(ValueError):
        AlignedSample(
            image=np.zeros((64, 64, 3), dtype=np.float32),
            caption=[4, 5],
            trace=np.zeros((3, 4)),
            trace_mask=np.zeros(3, dtype=bool),
            boxes=np.zeros((1, 4)),
            referring=[],
        )
    with pytest.raises(ValueError):
        AlignedSample(
            image=np.zeros((64, 64, 3), dtype=np.float32),
            caption=[4],
            trace=np.full((1, 4), 1.5),
            trace_mask=np.ones(1, dtype=bool),
            boxes=np.zeros((1, 4)),
            referring=[],
        )


def test_augmenter_matches_a_fresh_render(vocab, world, rng):
    """Flipping/rolling pixels must equal re-rendering the transformed scene."""
    aug = make_augmenter(vocab)
    for seed in range(20):
        sample = make_sample(generate_scene(1000 + seed, world), vocab, "dense")
        out = aug(sample, rng)
        objects = []
        for query, idx in out.referring:
            words = vocab.decode(query).split()
            box = tuple(float(v) * 64 for v in out.boxes[idx])
            objects.append(SceneObject(shape=words[2], color=words[1], box=box))
        rebuilt = Scene(width=64, height=64, objects=objects, rng_seed=0)
        assert np.array_equal(out.image, render_scene(rebuilt))
        tokens, trace, mask = narrate_scene(rebuilt, vocab, "dense")
        assert tokens == out.caption
        assert np.allclose(trace, out.trace)
        assert np.array_equal(mask, out.trace_mask)


def test_augmenter_is_deterministic_and_mode_preserving(vocab, world):
    aug = make_augmenter(vocab)
    sample = make_sample(generate_scene(3, world), vocab, "sparse")
    a = aug(sample, np.random.default_rng([1, 2]))
    b = aug(sample, np.random.default_rng([1, 2]))
    assert np.array_equal(a.image, b.image)
    assert a.caption == b.caption
    assert sample_mode(a) == "sparse"


def test_augmenter_identity_when_disabled(vocab, world, rng):
    aug = make_augmenter(vocab, flip=False, translate=False)
    sample = make_sample(generate_scene(3, world), vocab, "dense")
    out = aug(sample, rng)
    assert np.array_equal(out.image, sample.image)
    assert out.caption == sample.caption


def test_augmenter_recolor_matches_a_fresh_render(vocab, world, rng):
    aug = make_augmenter(vocab, recolor=True)
    for seed in range(20):
        sample = make_sample(generate_scene(2000 + seed, world), vocab, "dense")
        out = aug(sample, rng)
        objects = []
        for query, idx in out.referring:
            words = vocab.decode(query).split()
            box = tuple(float(v) * 64 for v in out.boxes[idx])
            objects.append(SceneObject(shape=words[2], color=words[1], box=box))
        rebuilt = Scene(width=64, height=64, objects=objects, rng_seed=0)
        assert np.array_equal(out.image, render_scene(rebuilt))
        tokens, _, _ = narrate_scene(rebuilt, vocab, "dense")
        assert tokens == out.caption


def test_augmenter_recolor_preserves_geometry(vocab, world):
    aug = make_augmenter(vocab, flip=False, translate=False, recolor=True)
    sample = make_sample(generate_scene(5, world), vocab, "dense")
    moved = 0
    for attempt in range(8):
        out = aug(sample, np.random.default_rng([7, attempt]))
        assert np.array_equal(out.boxes, sample.boxes)
        assert np.array_equal(out.trace, sample.trace)
        old_shapes = [vocab.decode(q).split()[2] for q, _ in sample.referring]
        assert [vocab.decode(q).split()[2] for q, _ in out.referring] == old_shapes
        moved += int(out.caption != sample.caption)
    assert moved > 0  # most permutations actually change the colors


def test_generate_dataset_offset_selects_fresh_scenes(vocab, world):
    a = generate_dataset(2, 7, world, vocab, "dense")
    b = generate_dataset(2, 7, world, vocab, "dense", index_offset=100)
    assert not np.array_equal(a[0].image, b[0].image)
    c = generate_dataset(2, 7, world, vocab, "dense")
    assert np.array_equal(a[1].image, c[1].image)


# ---------------------------------------------------------------------------
# on-disk formats
# ---------------------------------------------------------------------------

def test_ppm_roundtrip_is_bit_exact(tmp_path, rng):
    img = rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
    as_float = img.astype(np.float32) / np.float32(255.0)
    path = tmp_path / "img.ppm"
    write_ppm(path, as_float)
    back = read_ppm(path)
    assert np.array_equal(back, as_float)


def test_read_ppm_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 48)
    with pytest.raises(DatasetFormatError):
        read_ppm(path)


def test_read_ppm_rejects_wrong_maxval(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P6\n2 2\n65535\n" + b"\x00" * 12)
    with pytest.raises(DatasetFormatError):
        read_ppm(path)


def test_read_ppm_rejects_truncated_pixels(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P6\n4 4\n255\n" + b"\x00" * 10)
    with pytest.raises(DatasetFormatError):
        read_ppm(path)


def test_dataset_roundtrip(tmp_path, vocab, world):
    samples = generate_dataset(3, 11, world, vocab, "dense")
    write_dataset(samples, tmp_path / "ds")
    loaded = read_dataset(tmp_path / "ds")
    assert len(loaded) == 3
    for orig, back in zip(samples, loaded):
        assert np.array_equal(orig.image, back.image)
        assert orig.caption == back.caption
        assert np.abs(orig.trace - back.trace).max() <= 1e-6
        assert np.array_equal(orig.trace_mask, back.trace_mask)
        assert np.abs(orig.boxes - back.boxes).max() <= 1e-6
        assert orig.referring == back.referring


def test_read_dataset_reports_missing_meta(tmp_path):
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path)


def test_read_dataset_reports_line_numbers(tmp_path, vocab, world):
    out = tmp_path / "ds"
    write_dataset(generate_dataset(1, 11, world, vocab, "dense"), out)
    meta = out / "meta.jsonl"
    meta.write_text(meta.read_text() + '{"id": "000001"}\n')
    with pytest.raises(DatasetFormatError, match="line 2"):
        read_dataset(out)


def test_read_dataset_reports_missing_image(tmp_path, vocab, world):
    out = tmp_path / "ds"
    write_dataset(generate_dataset(1, 11, world, vocab, "dense"), out)
    (out / "images" / "000000.ppm").unlink()
    with pytest.raises(DatasetFormatError, match="000000"):
        read_dataset(out)
