import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vehsearch.data import (
    FrameStore,
    SynthConfig,
    Track,
    TrackFormatError,
    dumps_tracks,
    generate_synthetic,
    load_tracks,
    preprocess,
    render_box_mask,
    save_tracks,
    split_tracks,
    translate,
)
from vehsearch.text import AttributeLexicon, denoise_queries, extract_attributes


@pytest.fixture(scope="module")
def small_corpus():
    return generate_synthetic(SynthConfig(seed=3, num_tracks=12, frames_per_track=4))


def write_json(tmp_path, obj, name="tracks.json"):
    path = tmp_path / name
    path.write_text(json.dumps(obj), encoding="utf-8")
    return path


# ---------------------------------------------------------------- track files


def test_minimal_track_file(tmp_path):
    path = write_json(tmp_path, {"a": {"frames": ["f.png"], "boxes": [[1, 2, 3, 4]], "nl": ["x", "y", "z"]}})
    tracks = load_tracks(path)
    assert len(tracks) == 1
    assert tracks[0] == Track("a", ["f.png"], [[1, 2, 3, 4]], ["x", "y", "z"])


def test_two_descriptions_rejected(tmp_path):
    path = write_json(tmp_path, {"a": {"frames": ["f.png"], "boxes": [[1, 2, 3, 4]], "nl": ["x", "y"]}})
    with pytest.raises(TrackFormatError, match="track a"):
        load_tracks(path)


def test_malformed_json_reports_byte_offset(tmp_path):
    path = tmp_path / "bad.json"
    path.write_bytes('{"ü": {"frames": [}'.encode())
    with pytest.raises(TrackFormatError, match=r"byte 19"):
        load_tracks(path)


def test_box_out_of_bounds_names_track_and_frame(tmp_path):
    obj = {"t9": {"frames": ["a.png", "b.png"], "boxes": [[0, 0, 5, 5], [90, 0, 10, 5]], "nl": ["x", "y", "z"]}}
    path = write_json(tmp_path, obj)
    with pytest.raises(TrackFormatError, match="track t9, frame 1"):
        load_tracks(path, frame_size=(96, 96))


def test_frame_box_count_mismatch(tmp_path):
    obj = {"t": {"frames": ["a.png", "b.png"], "boxes": [[0, 0, 5, 5]], "nl": ["x", "y", "z"]}}
    with pytest.raises(TrackFormatError, match="track t"):
        load_tracks(write_json(tmp_path, obj))


def test_negative_box_rejected(tmp_path):
    obj = {"t": {"frames": ["a.png"], "boxes": [[-1, 0, 5, 5]], "nl": ["x", "y", "z"]}}
    with pytest.raises(TrackFormatError, match="frame 0"):
        load_tracks(write_json(tmp_path, obj))


def test_roundtrip_is_byte_identical(tmp_path, small_corpus):
    first = tmp_path / "a.json"
    save_tracks(small_corpus.tracks, first)
    second = tmp_path / "b.json"
    save_tracks(load_tracks(first), second)
    assert first.read_bytes() == second.read_bytes()
    assert load_tracks(first) == small_corpus.tracks


def test_roundtrip_normalizes_key_order(tmp_path):
    a = {"b": {"nl": ["x", "y", "z"], "frames": ["f"], "boxes": [[0, 0, 1, 1]]},
         "a": {"frames": ["g"], "boxes": [[0, 0, 2, 2]], "nl": ["p", "q", "r"]}}
    b = dict(reversed(list(a.items())))
    ta, tb = load_tracks(write_json(tmp_path, a, "a.json")), load_tracks(write_json(tmp_path, b, "b.json"))
    assert dumps_tracks(ta) == dumps_tracks(tb)


# ---------------------------------------------------------------- box masks


def test_full_box_covers_everything():
    g, b = render_box_mask([0, 0, 96, 96], 96, 12)
    assert g.shape == (96, 96) and b.shape == (1, 12, 12)
    assert g.all() and b.all()


def test_one_cell_box_activates_one_cell():
    g, b = render_box_mask([16, 24, 8, 8], 96, 12)
    assert b.sum() == 1 and b[0, 3, 2] == 1
    assert g.sum() == 64


def test_tiny_box_falls_back_to_center_cell():
    _, b = render_box_mask([1, 1, 2, 2], 96, 12)
    assert b.sum() == 1 and b[0, 0, 0] == 1


@pytest.mark.parametrize("box", [[0, 0, 0, 5], [0, 0, 5, -1]])
def test_degenerate_box_rejected(box):
    with pytest.raises(ValueError):
        render_box_mask(box, 96, 12)


@given(st.integers(0, 60), st.integers(0, 60), st.integers(32, 36), st.integers(32, 36))
@settings(max_examples=60, deadline=None)
def test_area_fractions_agree_within_one_cell(x, y, w, h):
    g, b = render_box_mask([x, y, w, h], 96, 12)
    cell = 1 / 144
    # one row or column of cells can flip per box edge
    assert abs(g.mean() - b.mean()) <= 2 * 12 * cell


@given(st.integers(0, 80), st.integers(0, 80), st.integers(8, 40), st.integers(8, 40),
       st.integers(0, 20), st.integers(0, 20))
@settings(max_examples=80, deadline=None)
def test_growing_a_box_never_deactivates_cells(x, y, w, h, dw, dh):
    _, small = render_box_mask([x, y, w, h], 96, 12)
    _, big = render_box_mask([x, y, w + dw, h + dh], 96, 12)
    assert np.all(big >= small)


# ---------------------------------------------------------------- preprocessing


def test_zero_translation_is_identity():
    img = np.random.default_rng(0).uniform(size=(3, 32, 32)).astype(np.float32)
    out, box = translate(img, [4, 5, 6, 7], 0, 0)
    assert np.array_equal(out, img) and box == [4, 5, 6, 7]


def test_translation_moves_image_and_box_together():
    img = np.zeros((3, 96, 96), dtype=np.float32)
    img[:, 20:30, 10:20] = 1.0
    out, box = translate(img, [10, 20, 10, 10], 10, 0)
    assert box == [20, 20, 10, 10]
    g_out = render_box_mask(box, 96, 12)[0]
    assert np.array_equal(out[0] > 0, g_out > 0)


def test_translation_zero_pads():
    img = np.ones((3, 10, 10), dtype=np.float32)
    out, _ = translate(img, [0, 0, 10, 10], 3, -2)
    assert out[:, :, :3].sum() == 0 and out[:, -2:, :].sum() == 0


def test_eval_mode_never_translates():
    img = np.random.default_rng(1).uniform(size=(3, 96, 96)).astype(np.float32)
    for seed in range(20):
        out, box, shift = preprocess(img, [10, 10, 20, 20], False, 96, np.random.default_rng(seed))
        assert shift == (0, 0) and box == [10, 10, 20, 20]
        assert np.array_equal(out, img)


def test_training_shift_bounded_and_box_kept():
    img = np.zeros((3, 96, 96), dtype=np.float32)
    rng = np.random.default_rng(0)
    for _ in range(50):
        _, box, (dx, dy) = preprocess(img, [0, 0, 12, 12], True, 96, rng)
        assert abs(dx) <= 9 and abs(dy) <= 9
        assert box[2] * box[3] >= 0.25 * 144


def test_preprocess_resizes_and_scales_box():
    img = np.zeros((3, 48, 64), dtype=np.float32)
    out, box, _ = preprocess(img, [8, 12, 16, 24], False, 96)
    assert out.shape == (3, 96, 96)
    assert box == [12.0, 24.0, 24.0, 48.0]


# ---------------------------------------------------------------- synthetic corpus


def test_same_seed_is_byte_identical():
    cfg = SynthConfig(seed=11, num_tracks=6, frames_per_track=3)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert dumps_tracks(a.tracks) == dumps_tracks(b.tracks)
    assert a.frames.keys() == b.frames.keys()
    assert all(np.array_equal(a.frames[k], b.frames[k]) for k in a.frames)


def test_different_seed_differs():
    a = generate_synthetic(SynthConfig(seed=1, num_tracks=4, frames_per_track=2))
    b = generate_synthetic(SynthConfig(seed=2, num_tracks=4, frames_per_track=2))
    assert dumps_tracks(a.tracks) != dumps_tracks(b.tracks)


def test_frames_are_rgb_uint8_and_boxes_in_bounds(small_corpus):
    for t in small_corpus.tracks:
        t.validate(frame_size=(96, 96))
        for rel in t.frames:
            arr = small_corpus.frames[rel]
            assert arr.shape == (96, 96, 3) and arr.dtype == np.uint8


def test_target_box_holds_target_color(small_corpus):
    from vehsearch.data import COLOR_RGB

    for t in small_corpus.tracks:
        x, y, w, h = t.boxes[0]
        patch = small_corpus.frames[t.frames[0]][y : y + h, x : x + w].reshape(-1, 3) / 255.0
        target = np.array(COLOR_RGB[small_corpus.truth[t.track_id].color])
        close = np.abs(patch - target).max(axis=1) < 0.1
        assert close.mean() > 0.3


def test_clean_corpus_denoise_is_noop():
    corpus = generate_synthetic(SynthConfig(seed=5, num_tracks=40, frames_per_track=2, p_noise=0.0))
    lex = AttributeLexicon.default()
    for t in corpus.tracks:
        assert denoise_queries(t.nl, lex)[1] == t.nl


def test_unnoised_descriptions_parse_to_generating_attributes():
    corpus = generate_synthetic(SynthConfig(seed=9, num_tracks=80, frames_per_track=2))
    lex = AttributeLexicon.default()
    for t in corpus.tracks:
        truth = corpus.truth[t.track_id]
        for i, d in enumerate(t.nl):
            if i == truth.noised_index:
                continue
            c, k = extract_attributes(d, lex)
            assert (lex.color_names[c], lex.type_names[k]) == (truth.color, truth.type)


def test_distractors_differ_from_target():
    from vehsearch.data import generate_synthetic as gen

    corpus = gen(SynthConfig(seed=4, num_tracks=30, frames_per_track=2))
    # every frame shows at least the target; distractor attributes are checked at generation
    assert all(len(t.frames) == 2 for t in corpus.tracks)


@pytest.mark.parametrize("field,value", [("palette", ("black", "teal")), ("shapes", ("sedan", "tank"))])
def test_unknown_palette_or_shape_rejected(field, value):
    with pytest.raises(ValueError):
        generate_synthetic(SynthConfig(num_tracks=2, **{field: value}))


def test_num_tracks_must_be_positive():
    with pytest.raises(ValueError):
        generate_synthetic(SynthConfig(num_tracks=0))


def test_split_is_seeded_and_disjoint(small_corpus):
    a_train, a_test = split_tracks(small_corpus.tracks, 42, 0.25)
    b_train, b_test = split_tracks(small_corpus.tracks, 42, 0.25)
    assert a_test == b_test and len(a_test) == 3 and len(a_train) == 9
    assert not {t.track_id for t in a_train} & {t.track_id for t in a_test}


def test_written_corpus_loads_back(tmp_path, small_corpus):
    small_corpus.write(tmp_path)
    tracks = load_tracks(tmp_path / "tracks.json", frame_size=(96, 96))
    store = FrameStore(root=tmp_path / "frames")
    rel = tracks[0].frames[0]
    expected = small_corpus.store().get(rel)
    assert np.array_equal(store.get(rel), expected)
