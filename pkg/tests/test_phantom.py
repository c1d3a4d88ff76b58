import numpy as np
import pytest

from medmusnet import phantom as P
from medmusnet.geometry import LABEL


@pytest.fixture(scope="module")
def case():
    return P.generate(P.PhantomConfig(seed=3))


def test_shapes_and_kinds(case):
    img, lab, prostate = case
    g = P.desk_geometry()
    assert img.frames.shape == (g.n_frames,) + g.frame_shape
    assert lab.kind == LABEL and set(np.unique(lab.frames)) <= {0, 1}
    assert prostate.values.any()
    assert np.all(img.frames >= 0) and np.all(np.isfinite(img.frames))


def test_lesion_present_and_darker_than_gland(case):
    img, lab, _ = case
    m = lab.frames.astype(bool)
    assert 0 < m.mean() < 0.1
    # lesion echo = gland echo / contrast; compare against the ring around it
    from scipy import ndimage

    ring = ndimage.binary_dilation(m, iterations=2) & ~m
    assert img.frames[m].mean() < img.frames[ring].mean()


def test_same_seed_same_output():
    a = P.generate(P.PhantomConfig(seed=7))
    b = P.generate(P.PhantomConfig(seed=7))
    c = P.generate(P.PhantomConfig(seed=8))
    assert np.array_equal(a[0].frames, b[0].frames) and np.array_equal(a[1].frames, b[1].frames)
    assert not np.array_equal(a[0].frames, c[0].frames)


def test_contrast_one_makes_lesion_invisible_without_noise():
    base = dict(seed=2, noise_scale=0.0, texture_amplitude=0.0)
    with_lesion = P.generate(P.PhantomConfig(contrast=1.0, **base))[0].frames
    no_lesion = P.generate(P.PhantomConfig(contrast=1.0, n_lesions=0, **base))[0].frames
    np.testing.assert_allclose(with_lesion, no_lesion, atol=1e-9)


def test_lesions_inside_prostate():
    for seed in range(5):
        cfg = P.PhantomConfig(seed=seed, n_lesions=2)
        scene = P.render_scene(cfg)
        les = scene.lesion_mask.values.astype(bool)
        assert np.all(scene.prostate_mask.values.astype(bool)[les])


def test_explicit_lesion_outside_rejected():
    cfg = P.PhantomConfig(seed=0)
    far = P.Lesion(tuple(cfg.center() + np.array([50.0, 0, 0])), (2.0, 2.0, 2.0))
    with pytest.raises(ValueError):
        P.render_scene(P.PhantomConfig(seed=0, lesions=[far]))


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        P.PhantomConfig(contrast=0)
    with pytest.raises(ValueError):
        P.PhantomConfig(prostate_semi_axes_mm=(1, -1, 1))
    cfg = P.PhantomConfig(seed=4, lesions=[P.Lesion((1.0, 2.0, 3.0), (1.0, 1.0, 1.0))])
    assert P.PhantomConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        P.PhantomConfig.from_dict({"nope": 1})


def test_cohort_seeds():
    cs = P.cohort(3, base_seed=10, contrast=2.0)
    assert [c.seed for c in cs] == [10, 11, 12] and all(c.contrast == 2.0 for c in cs)
