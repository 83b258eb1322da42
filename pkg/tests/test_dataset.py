import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridcast import dataset
from gridcast.dataset import (
    ClipSpec,
    CollapsedSample,
    collapse_time,
    enumerate_clips,
    expand_time,
    index_movies,
    load_clip,
    read_slots,
    synth_movie,
    temporal_features,
    write_slots,
)
from gridcast.movie_store import ingest, open_movie


@pytest.fixture
def ramp_movie(tmp_path):
    raw = synth_movie("time_ramp", 0, (288, 3, 6, 6))
    path = ingest(raw, "toy", "2019-01-07", tmp_path / "toy.tmm")
    with open_movie(path) as m:
        yield m


def test_enumerate_full_day(ramp_movie):
    specs = enumerate_clips([ramp_movie], stride=1)
    assert len(specs) == 274
    assert specs[0].t_start == 0
    assert specs[-1].t_start == 273


def test_enumerate_test_slot_filter(ramp_movie):
    specs = enumerate_clips([ramp_movie], stride=1, test_slots={100})
    assert [s.t_start for s in specs] == [88]


def test_enumerate_stride_full_day(ramp_movie):
    specs = enumerate_clips([ramp_movie], stride=288)
    assert [s.t_start for s in specs] == [0]


def test_enumerate_sorted_and_deterministic(tmp_path):
    movies = []
    for city, day in [("b", "2019-01-02"), ("a", "2019-01-03"), ("a", "2019-01-02")]:
        raw = synth_movie("constant", 0, (20, 1, 2, 2))
        movies.append(open_movie(ingest(raw, city, day, tmp_path / f"{city}{day}.tmm")))
    specs = enumerate_clips(movies, stride=4)
    keys = [(s.city, s.day, s.t_start) for s in specs]
    assert keys == sorted(keys)
    assert specs == enumerate_clips(list(reversed(movies)), stride=4)
    for m in movies:
        m.close()


def test_enumerate_rejects_bad_args(ramp_movie):
    with pytest.raises(ValueError):
        enumerate_clips([], stride=1)
    with pytest.raises(ValueError):
        enumerate_clips([ramp_movie], stride=0)


def test_load_clip_splits_input_and_target(ramp_movie):
    clip = load_clip(ClipSpec("toy", "2019-01-07", 0), index_movies([ramp_movie]))
    for i in range(12):
        assert np.all(clip.input[i] == i)
    for j in range(3):
        assert np.all(clip.target[j] == 12 + j)


def test_load_clip_frames_are_readonly_store_views(ramp_movie):
    movies = index_movies([ramp_movie])
    spec = ClipSpec("toy", "2019-01-07", 3)
    a = load_clip(spec, movies)
    b = load_clip(spec, movies)
    assert np.array_equal(a.input, b.input) and np.array_equal(a.target, b.target)
    assert not a.input.flags.writeable  # stored bytes cannot be mutated in place
    with pytest.raises(ValueError):
        a.input[0, 0, 0, 0] = 99


def test_load_clip_region_crop(ramp_movie):
    spec = ClipSpec("toy", "2019-01-07", 5, region=(1, 2, 4, 3))
    clip = load_clip(spec, index_movies([ramp_movie]))
    assert clip.input.shape == (12, 3, 4, 3)
    assert clip.target.shape == (3, 3, 4, 3)


def test_load_clip_errors(ramp_movie):
    movies = index_movies([ramp_movie])
    with pytest.raises(ValueError):
        load_clip(ClipSpec("toy", "2019-01-07", 274), movies)
    with pytest.raises(KeyError):
        load_clip(ClipSpec("elsewhere", "2019-01-07", 0), movies)
    with pytest.raises(ValueError):
        load_clip(ClipSpec("toy", "2019-01-07", 0, region=(5, 5, 4, 4)), movies)


def test_collapse_shape_and_order():
    frames = np.zeros((12, 3, 5, 4), dtype=np.uint8)
    sample = collapse_time(frames)
    assert sample.data.shape == (36, 5, 4)
    assert (sample.t, sample.c) == (12, 3)


def test_collapse_identity_when_single_frame_channel():
    frames = np.array([[[[1, 2], [3, 4]]]], dtype=np.uint8)
    sample = collapse_time(frames)
    assert np.array_equal(sample.data, frames[0])


def test_collapse_matches_naive_oracle():
    t, c, h, w = 2, 3, 1, 1
    frames = np.empty((t, c, h, w), dtype=np.uint8)
    for ti in range(t):
        for ci in range(c):
            frames[ti, ci] = 10 * ti + ci
    sample = collapse_time(frames)
    assert sample.data[:, 0, 0].tolist() == [0, 1, 2, 10, 11, 12]
    # naive elementwise oracle: channel k holds frame k//c, channel k%c
    for k in range(t * c):
        assert np.array_equal(sample.data[k], frames[k // c, k % c])


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 6), st.integers(1, 4), st.integers(1, 5), st.integers(1, 5),
    st.integers(0, 2**32 - 1),
)
def test_expand_inverts_collapse(t, c, h, w, seed):
    rng = np.random.default_rng(seed)
    frames = rng.integers(0, 256, size=(t, c, h, w), dtype=np.uint8)
    assert np.array_equal(expand_time(collapse_time(frames)), frames)


def test_expand_shape_and_divisibility():
    sample = CollapsedSample(np.zeros((9, 4, 4)), 3, 3)
    assert expand_time(sample).shape == (3, 3, 4, 4)
    with pytest.raises(ValueError):
        CollapsedSample(np.zeros((7, 4, 4)), 3, 3)


def test_temporal_features_monday():
    feats = temporal_features(ClipSpec("b", "2019-01-07", 0))  # a Monday
    assert feats.day_of_week == 0
    assert feats.slot_of_day == 12
    assert feats.slot_norm == pytest.approx(12 / 288)


def test_temporal_features_midday_norm():
    feats = temporal_features(ClipSpec("b", "2019-01-09", 132))
    assert feats.slot_of_day == 144
    assert feats.slot_norm == 0.5
    assert feats.day_of_week == 2  # Wednesday


def test_temporal_features_slot_range():
    for t_start in (0, 100, 273):
        assert temporal_features(ClipSpec("b", "2019-01-07", t_start)).slot_of_day < 288
    with pytest.raises(ValueError):
        temporal_features(ClipSpec("b", "not-a-date", 0))


def test_slots_file_roundtrip(tmp_path):
    path = tmp_path / "slots.txt"
    write_slots(path, {30, 12, 100})
    assert path.read_text() == "12\n30\n100\n"
    assert read_slots(path) == {12, 30, 100}


def test_synth_constant_and_ramp():
    zeros = synth_movie("constant", 0, (4, 3, 2, 2))
    assert not zeros.any()
    assert np.all(synth_movie("constant", 0, (1, 1, 2, 2), value=9) == 9)
    ramp = synth_movie("time_ramp", 0, (300, 1, 2, 2))
    for i in (0, 17, 255, 256, 299):
        assert np.all(ramp[i] == i % 256)


def test_synth_slot_pattern_repeatable_days():
    shape = (288, 3, 8, 8)
    day1 = synth_movie("slot_pattern", 5, shape)
    day2 = synth_movie("slot_pattern", 5, shape)
    assert np.array_equal(day1, day2)
    assert set(np.unique(day1[:, dataset.HEADING_CHANNEL])) <= set(dataset.HEADING_CLASSES)


def test_synth_random_heading_classes():
    movie = synth_movie("random", 3, (10, 3, 6, 6))
    assert set(np.unique(movie[:, dataset.HEADING_CHANNEL])) <= set(dataset.HEADING_CLASSES)
    assert np.array_equal(movie, synth_movie("random", 3, (10, 3, 6, 6)))


def test_synth_rejects_unknown_kind():
    with pytest.raises(ValueError):
        synth_movie("noise", 0, (1, 1, 1, 1))
