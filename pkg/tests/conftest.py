import numpy as np
import pytest

from stereoqa import datakit, nss
from stereoqa.datakit import StereoSample, apply_distortion
from stereoqa.imagepipe import GrayImage
from stereoqa.training import SampleData


def make_sample_data(contents=4, size=64, seed=0, types=("synth-blur", "synth-awgn"),
                     levels=(1, 2, 3)):
    """Small in-memory dataset with real extracted naturalness features."""
    data = []
    for content in range(contents):
        rng = np.random.default_rng([seed, content])
        left = datakit._pristine_texture(rng, size, size)
        right = datakit._shift_right_view(left, int(rng.integers(1, 5)))
        ref = f"c{content:03d}"
        entries = [("pristine", 0, 0.0)]
        entries += [(tag, lv, 20.0 * lv) for tag in types for lv in levels]
        for tag, level, dmos in entries:
            gl, gr = GrayImage(left), GrayImage(right)
            if level:
                s = content * 100 + level
                gl = apply_distortion(gl, tag, level, seed=s)
                gr = apply_distortion(gr, tag, level, seed=s + 1)
            sample = StereoSample(
                id=f"{ref}-{tag}-l{level}", ref_id=ref, left_path="mem",
                right_path="mem", dmos=dmos,
                distortion=tag if level else "pristine", symmetry="symmetric")
            data.append(SampleData(sample=sample, left=gl, right=gr,
                                   features=nss.extract_nss_features(gl, gr)))
    return data


@pytest.fixture(scope="session")
def tiny_dataset():
    """Session-wide 4-content dataset (28 samples) for training tests."""
    return make_sample_data(contents=4)
