import numpy as np
import pytest

from segdebias.bank import build_centroid_bank
from segdebias.core import DatasetManifest, FeatureMap, ImageRecord
from segdebias.pipeline import debias_all
from segdebias.selection import select_debiased
from segdebias.synth import SynthConfig, generate


@pytest.fixture(scope="session")
def standard_corpus(tmp_path_factory):
    return generate(SynthConfig.standard(), tmp_path_factory.mktemp("standard_corpus"))


@pytest.fixture(scope="session")
def standard_bank(standard_corpus):
    return build_centroid_bank(
        standard_corpus.manifest,
        standard_corpus.pseudo_labels(),
        k_fg=2,
        k_bg=2,
        seed=0,
        features=standard_corpus.features(),
    )


@pytest.fixture(scope="session")
def standard_centroids(standard_bank):
    return select_debiased(standard_bank, 0.40)


@pytest.fixture(scope="session")
def standard_debiased(standard_corpus, standard_centroids):
    return debias_all(
        standard_corpus.manifest,
        standard_corpus.features(),
        standard_corpus.pseudo_labels(),
        standard_centroids,
        0.30,
    )


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    config = SynthConfig(
        num_images=8,
        image_size=(12, 20),
        num_classes=2,
        embedding_dim=12,
        problematic_classes=(1,),
        secondary_class_rate=0.5,
        bias_in_background_rate=0.8,
        seed=11,
    )
    return generate(config, tmp_path_factory.mktemp("tiny_corpus"))


def random_feature_map(rng, d=3, h=4, w=5) -> FeatureMap:
    data = rng.normal(size=(d, h, w)).astype(np.float32)
    # keep every pixel vector clearly nonzero
    data[0] += np.sign(data[0]) + (data[0] == 0)
    return FeatureMap(data)


def single_record_manifest(tmp_path, fmap, label, truth, gt=None):
    """Write one image to disk and wrap it in a manifest (for loader paths)."""
    from segdebias import formats

    fpath = tmp_path / "img.features.bin"
    lpath = tmp_path / "img.labels.bin"
    formats.write_feature_map(fpath, fmap)
    formats.write_label_map(lpath, label)
    gt_path = None
    if gt is not None:
        gt_path = tmp_path / "img.gt.bin"
        formats.write_label_map(gt_path, gt)
    record = ImageRecord(
        image_id="img",
        feature_path=fpath,
        label_path=lpath,
        truth_classes=frozenset(truth),
        gt_path=gt_path,
    )
    return DatasetManifest(
        records=(record,),
        num_classes=label.num_classes,
        embedding_dim=fmap.embedding_dim,
    )
