import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agnostic_ssl.augment import AugmentDraw, AugmentPolicy, apply
from agnostic_ssl.datamodel import AnnotatedImage, BBox, Instance, ValidationError
from agnostic_ssl.synthgen import SynthSpec, generate_image

from helpers import box_mask

WEAK = AugmentPolicy("weak")
STRONG = AugmentPolicy("strong")


def _image(seed=0, index=0):
    return generate_image(SynthSpec(seed=seed, num_images=1), index)


def test_identity_draw_returns_input():
    im = _image()
    assert apply(WEAK, im, AugmentDraw()) is im
    assert apply(STRONG, im, AugmentDraw()) is im


def test_half_scale_box():
    m = box_mask(64, 64, 8, 8, 24, 24)
    px = np.full((64, 64, 3), 0.5, dtype=np.float32)
    im = AnnotatedImage("b", 64, 64, px, (Instance(BBox(8, 8, 24, 24), m, class_id=0),))
    out = apply(WEAK, im, AugmentDraw(scale=0.5))
    assert (out.height, out.width) == (32, 32)
    assert out.pixels.shape == (32, 32, 3)
    assert out.instances[0].bbox.as_tuple() == (4, 4, 12, 12)
    assert out.instances[0].mask.area == 64


def test_half_scale_box_without_mask():
    im = AnnotatedImage("b", 64, 64, None, (Instance(BBox(8, 8, 24, 24), class_id=0),))
    assert apply(WEAK, im, AugmentDraw(scale=0.5)).instances[0].bbox.as_tuple() == (4, 4, 12, 12)


def test_brightness_only_keeps_geometry():
    im = _image(index=3)
    out = apply(STRONG, im, AugmentDraw(brightness=0.1))
    assert out.instances == im.instances
    assert not np.array_equal(out.pixels, im.pixels)


def test_weak_rejects_photometric_draw():
    with pytest.raises(ValidationError):
        apply(WEAK, _image(), AugmentDraw(brightness=0.1))


def test_policy_validation():
    with pytest.raises(ValidationError):
        AugmentPolicy("medium")
    with pytest.raises(ValidationError):
        AugmentPolicy(scales=(0.0, 1.0))


def test_tiny_instance_dropped():
    m = box_mask(64, 64, 11, 11, 12, 12)
    im = AnnotatedImage("t", 64, 64, None, (Instance(BBox(11, 11, 12, 12), m, class_id=0),))
    # a single pixel at (11,11) is not sampled by nearest resampling at quarter scale
    out = apply(STRONG, im, AugmentDraw(scale=0.25))
    assert out.instances == ()


def test_sampling_ranges():
    rng = np.random.default_rng(0)
    weak = [WEAK.sample(rng) for _ in range(200)]
    assert {d.scale for d in weak} == {0.75, 1.0, 1.25}
    assert all(d.brightness == 0.0 and d.contrast == 1.0 for d in weak)
    strong = [STRONG.sample(rng) for _ in range(200)]
    assert all(0.5 <= d.scale <= 1.5 and -0.2 <= d.brightness <= 0.2 and 0.75 <= d.contrast <= 1.25 for d in strong)


draws = st.builds(
    AugmentDraw,
    scale=st.floats(0.5, 1.5),
    brightness=st.floats(-0.2, 0.2),
    contrast=st.floats(0.75, 1.25),
)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), draws)
def test_strong_preserves_invariants(index, draw):
    im = _image(seed=5, index=index)
    out = apply(STRONG, im, draw)
    out.check(tight=True)
    assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0
    for inst in out.instances:
        assert inst.bbox.as_tuple() == inst.mask.tight_box().as_tuple()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([0.75, 1.0, 1.25]))
def test_weak_only_resamples(index, scale):
    im = _image(seed=6, index=index)
    out = apply(WEAK, im, AugmentDraw(scale=scale))
    out.check(tight=True)
    if scale == 1.0:
        assert out is im
    else:
        # bilinear resampling keeps the value range and roughly the mean
        assert abs(float(out.pixels.mean()) - float(im.pixels.mean())) < 0.02


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(0.75, 1.25), st.floats(-0.2, 0.2))
def test_strong_geometry_depends_only_on_scale(index, contrast, brightness):
    im = _image(seed=8, index=index)
    a = apply(STRONG, im, AugmentDraw(scale=0.8, brightness=brightness, contrast=contrast))
    b = apply(STRONG, im, AugmentDraw(scale=0.8))
    assert a.instances == b.instances
