import numpy as np
import pytest

from craft.anchors import AnchorKind, AnchorSet
from craft.core import l2_normalize, make_rng
from craft.dataio import Modality, make_embedding_set


@pytest.fixture
def rng():
    return make_rng(1234)


def unit_rows(rng, n, dim):
    return l2_normalize(rng.standard_normal((n, dim)))


def random_anchors(rng, k, dim, modality=Modality.TEXT):
    return AnchorSet(unit_rows(rng, k, dim), modality, AnchorKind.STATIC,
                     class_names=[f"class_{i:03d}" for i in range(k)])


def orthonormal_anchors(k, dim, modality=Modality.TEXT):
    assert k <= dim
    return AnchorSet(np.eye(dim)[:k], modality, AnchorKind.STATIC,
                     class_names=[f"class_{i:03d}" for i in range(k)])


def toy_embedding_set(vectors, class_ids, modalities, num_classes=None, group_ids=None,
                      domains=None):
    """Hand-rolled embedding set; vectors are normalized for convenience."""
    vectors = l2_normalize(np.asarray(vectors, dtype=np.float64))
    n = vectors.shape[0]
    k = num_classes if num_classes is not None else int(max(class_ids)) + 1
    return make_embedding_set(
        vectors, class_ids,
        [int(m) for m in modalities],
        domains if domains is not None else np.zeros(n, dtype=np.uint8),
        group_ids if group_ids is not None else np.zeros(n, dtype=np.int64),
        [f"class_{i:03d}" for i in range(k)])
