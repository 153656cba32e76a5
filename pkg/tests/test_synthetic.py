from __future__ import annotations

import numpy as np
import pytest

from siamseg.core import Domain, ShapeSpec
from siamseg.data import Split, load_sample
from siamseg.errors import SynthesisError
from siamseg.synthetic import PhotometricShift, SynthConfig, _class_colors, synth_domain_pair


def _small(**overrides) -> SynthConfig:
    values = dict(seed=0, num_images=8, shape=ShapeSpec(32, 32, 3, 4))
    values.update(overrides)
    return SynthConfig(**values)


def test_same_config_is_byte_identical():
    a_src, a_tgt = synth_domain_pair(_small())
    b_src, b_tgt = synth_domain_pair(_small())
    for a, b in ((a_src, b_src), (a_tgt, b_tgt)):
        assert a.manifest == b.manifest
        for key in a.store.images:
            assert a.store.images[key].tobytes() == b.store.images[key].tobytes()
            assert a.store.labels[key].tobytes() == b.store.labels[key].tobytes()


def test_different_seed_changes_scenes():
    a, _ = synth_domain_pair(_small(seed=0))
    b, _ = synth_domain_pair(_small(seed=1))
    assert not np.array_equal(a.store.labels["source_00000"], b.store.labels["source_00000"])


def test_every_class_appears_in_source_labels():
    source, _ = synth_domain_pair(_small())
    present = np.unique(np.concatenate([lab.ravel() for lab in source.store.labels.values()]))
    assert present.tolist() == [0, 1, 2, 3]


def test_identity_shift_keeps_layouts_disjoint():
    source, target = synth_domain_pair(_small(shift=PhotometricShift()))
    assert not np.array_equal(source.store.labels["source_00000"], target.store.labels["target_00000"])


def test_rendered_colours_follow_labels():
    config = _small(shift=PhotometricShift())
    colors = _class_colors(config)
    source, _ = synth_domain_pair(config)
    image = source.store.images["source_00000"].astype(np.float64) / 255.0
    label = source.store.labels["source_00000"]
    for k in np.unique(label):
        if k == 0:
            continue  # textured background
        mean = image[label == k].mean(axis=0)
        assert np.allclose(mean, colors[k], atol=0.05)


def test_target_split_and_labels():
    config = _small(test_fraction=0.25)
    source, target = synth_domain_pair(config)
    assert source.manifest.count(Split.TEST) == 0
    assert target.manifest.count(Split.TEST) == 2
    assert [e.parent_id for e in target.manifest.split(Split.TEST).entries] == ["target_00006", "target_00007"]
    assert load_sample(source.manifest, 0).label is not None
    assert load_sample(target.manifest, 0).label is None
    assert load_sample(target.manifest, 0, evaluation=True).label is not None
    assert target.manifest.domain == Domain.TARGET


def test_samples_have_configured_shape():
    source, _ = synth_domain_pair(_small())
    sample = load_sample(source.manifest, 3)
    assert sample.image.shape == (32, 32, 3)
    assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0


def test_density_too_high_fails():
    with pytest.raises(SynthesisError):
        synth_domain_pair(_small(shape_density=1.0, num_images=2))


def test_shift_validation():
    with pytest.raises(ValueError):
        PhotometricShift(gains=(1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        PhotometricShift(permutation=(0, 0, 1))


def test_shift_applies_permutation_then_affine():
    shift = PhotometricShift(gains=(2.0, 1.0, 1.0), biases=(0.0, 0.1, 0.0), permutation=(2, 0, 1))
    pixel = np.array([[[0.1, 0.2, 0.3]]])
    assert np.allclose(shift.apply(pixel), [[[0.6, 0.2, 0.2]]])


def test_more_classes_than_named_kinds():
    config = _small(shape=ShapeSpec(48, 48, 3, 6), num_images=2)
    assert config.class_names == ["background", "rectangle_1", "ellipse_2", "band_3", "rectangle_4", "ellipse_5"]
