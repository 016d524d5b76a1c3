import numpy as np
import pytest
import torch

from src.config import LinearProbeConfig
from src.constants import CombineMode
from src.errors import DegenerateDataError, DomainError, ShapeError
from src.services.encoders import freeze
from src.services.probes import (
    clip_dataset, clip_features, combine_frames, fit_linear_probe, parameter_fingerprint, sample_clips, video_scores,
)


# ==================== Clips ====================

def test_sample_clips_short_video_is_identity():
    clips = sample_clips(16)
    assert len(clips) == 1
    assert clips[0].frame_indices == tuple(range(16))


def test_sample_clips_t40():
    (clip,) = sample_clips(40)
    assert list(clip.frame_indices) == [0, 3, 5, 8, 10, 13, 16, 18, 21, 23, 26, 29, 31, 34, 36, 39]


def test_sample_clips_long_video():
    clips = sample_clips(128)
    assert len(clips) == 9
    for clip in clips:
        assert clip.span == 61
        assert clip.coverage(128) >= 0.476
        assert np.all(np.diff(clip.frame_indices) == 4)
    assert clips[0].frame_indices[0] == 0
    assert clips[-1].frame_indices[-1] == 127


@pytest.mark.parametrize("t", range(16, 129))
def test_sample_clips_properties(t):
    clips = sample_clips(t)
    assert clips == sample_clips(t)
    for clip in clips:
        assert len(clip.frame_indices) == 16
        assert 0 <= clip.frame_indices[0] and clip.frame_indices[-1] <= t - 1
        assert clip.coverage(t) >= 0.476


def test_sample_clips_out_of_range():
    with pytest.raises(DomainError):
        sample_clips(15)
    with pytest.raises(DomainError):
        sample_clips(129)


def test_combine_frames(rng):
    e = rng.normal(size=8)
    np.testing.assert_allclose(combine_frames(np.tile(e, (16, 1)), CombineMode.AVERAGE), e)
    frames = rng.normal(size=(16, 8))
    np.testing.assert_array_equal(combine_frames(frames)[:8], frames[0])
    assert combine_frames(frames).shape == (128,)
    signed = np.concatenate([np.tile(e, (8, 1)), np.tile(-e, (8, 1))])
    np.testing.assert_allclose(combine_frames(signed, CombineMode.AVERAGE), np.zeros(8), atol=1e-12)
    with pytest.raises(ShapeError):
        combine_frames(frames[:15])


def test_clip_features_rows(rng):
    assert clip_features(rng.normal(size=(100, 4))).shape == (len(sample_clips(100)), 64)
    assert clip_features(rng.normal(size=(30, 4)), CombineMode.AVERAGE).shape == (1, 4)


# ==================== Linear probe ====================

def blobs(rng, n=60, d=6, classes=("a", "b", "c")):
    centers = rng.normal(0, 4, size=(len(classes), d))
    y = [classes[i % len(classes)] for i in range(n)]
    x = np.stack([centers[classes.index(c)] + rng.normal(0, 0.3, size=d) for c in y])
    return x, y


def test_linear_probe_separable(rng):
    x, y = blobs(rng)
    head = fit_linear_probe(x, y, LinearProbeConfig(lr=0.5, epochs=200))
    assert head.predict(x) == y
    np.testing.assert_allclose(head.predict_proba(x).sum(axis=1), 1.0)


def test_linear_probe_deterministic(rng):
    x, y = blobs(rng)
    a = fit_linear_probe(x, y, LinearProbeConfig(epochs=20), seed=3)
    b = fit_linear_probe(x, y, LinearProbeConfig(epochs=20), seed=3)
    np.testing.assert_array_equal(a.weight, b.weight)


def test_linear_probe_single_class():
    with pytest.raises(DegenerateDataError):
        fit_linear_probe(np.ones((4, 2)), ["a"] * 4)


def test_linear_probe_unknown_validation_label(rng):
    x, y = blobs(rng)
    with pytest.raises(DomainError):
        fit_linear_probe(x, y, LinearProbeConfig(epochs=2), x[:2], ["a", "zzz"])


def test_binary_probe_on_clips(rng):
    direction = rng.normal(size=4)
    videos, labels = [], []
    for v in range(12):
        label = v % 2
        frames = rng.normal(0, 0.2, size=(int(rng.integers(16, 80)), 4)) + (1 if label else -1) * direction
        videos.append(frames)
        labels.append(label)
    x, y, owners = clip_dataset(videos, labels)
    assert len(x) == len(y) == len(owners)
    assert set(owners.tolist()) == set(range(12))
    head = fit_linear_probe(x, y.tolist(), LinearProbeConfig(lr=0.5, epochs=100), classes=[0, 1], binary=True)
    scores = video_scores(head, videos)
    assert np.all(scores[1::2] > 0.5) and np.all(scores[::2] < 0.5)


def test_fingerprint_tracks_weights(tiny_model):
    freeze(tiny_model)
    before = parameter_fingerprint(tiny_model)
    assert parameter_fingerprint(tiny_model) == before
    with torch.no_grad():
        tiny_model.log_temperature.add_(0.1)
    assert parameter_fingerprint(tiny_model) != before
