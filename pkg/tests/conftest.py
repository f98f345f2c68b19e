"""Shared fixtures: small random containers built directly, not via the
synthetic generators, so the storage tests do not depend on them."""

import numpy as np

from bankadapt.embank import DownstreamDataset, EmbeddingBank


def unit_rows(rng, n, d, dtype=np.float32):
    x = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x.astype(dtype)


def random_bank(seed=0, m=17, d_img=6, d=4) -> EmbeddingBank:
    rng = np.random.default_rng(seed)
    return EmbeddingBank(
        images=rng.standard_normal((m, d_img)).astype(np.float32),
        feats=unit_rows(rng, m, d),
        caption_feats=unit_rows(rng, m, d),
        captions=[f"a photo of thing-{i}." for i in range(m)],
        latent_class=rng.integers(-1, 3, size=m).astype(np.int32),
    )


def random_dataset(seed=0, n=12, n_classes=3, d_img=6, d=4) -> DownstreamDataset:
    rng = np.random.default_rng(seed)
    return DownstreamDataset(
        images=rng.standard_normal((n, d_img)).astype(np.float32),
        labels=rng.integers(0, n_classes, size=n).astype(np.int32),
        class_names=[f"class-{c}" for c in range(n_classes)],
        class_descriptions=[f"synthetic category {c}" for c in range(n_classes)],
        class_text_feats=unit_rows(rng, n_classes, d),
    )
