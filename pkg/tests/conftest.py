import pytest

from fsodlab.synthdata import (
    ClassSplit,
    OrientationPolicy,
    ShapeFamily,
    SyntheticClassSpec,
    generate_dataset,
)


def standard_specs():
    return [
        SyntheticClassSpec(0, "disc", ShapeFamily.DISC, (14, 30), OrientationPolicy.AXIS_ALIGNED),
        SyntheticClassSpec(1, "rect", ShapeFamily.RECT, (14, 30), OrientationPolicy.FOURFOLD),
        SyntheticClassSpec(2, "bar", ShapeFamily.BAR, (16, 32), OrientationPolicy.FOURFOLD),
        SyntheticClassSpec(3, "cross", ShapeFamily.CROSS, (16, 32), OrientationPolicy.CONTINUOUS),
        SyntheticClassSpec(4, "triblade", ShapeFamily.TRIBLADE, (16, 32), OrientationPolicy.CONTINUOUS),
    ]


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    return generate_dataset(standard_specs(), n_images=80, image_size=128,
                            seed=42, out_dir=out)


@pytest.fixture(scope="session")
def standard_split():
    return ClassSplit(base_class_ids=frozenset({0, 1, 2}),
                      novel_class_ids=frozenset({3, 4}))
