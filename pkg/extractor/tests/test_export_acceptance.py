"""Exporter acceptance: the cross-component conformance criterion in one place.

A ten-image export must be accepted by the consumer's reader, carry exactly
(grid + 1) tokens per record, reproduce byte-for-byte under a fixed seed when
augmented, and use the published augmentation parameters verbatim.
"""

import numpy as np
from PIL import Image

from tfrb_extractor.augment import (
    BLUR_KERNELS,
    BLUR_PROB,
    JPEG_PROB,
    JPEG_QUALITY_RANGE,
)
from tfrb_extractor.extract import ExportConfig, SourceSpec, extract


def test_acceptance_10_exporter_conformance(tmp_path):
    rng = np.random.default_rng(10)
    real = tmp_path / "real"
    fake = tmp_path / "fake"
    for d, n in ((real, 5), (fake, 5)):
        d.mkdir()
        for i in range(n):
            arr = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
            Image.fromarray(arr).save(d / f"{i}.png")

    def config(out, augment):
        return ExportConfig(
            encoder="toy-vit-p16-d32-l2",
            resolution=64,
            sources=(
                SourceSpec(directory=str(real), label=0, tag="camera"),
                SourceSpec(directory=str(fake), label=1, tag="sd"),
            ),
            out_path=str(out),
            augment=augment,
            seed=7,
        )

    out = tmp_path / "export.tfrb"
    result = extract(config(out, augment=False))
    assert result.written == 10

    from tapdetect.featurestore import read_feature_file

    ds = read_feature_file(out)
    assert len(ds.records) == 10
    grid = (64 // 16) ** 2
    assert all(r.n_tokens == grid + 1 for r in ds.records)

    a = tmp_path / "aug_a.tfrb"
    b = tmp_path / "aug_b.tfrb"
    extract(config(a, augment=True))
    extract(config(b, augment=True))
    assert a.read_bytes() == b.read_bytes()

    assert JPEG_QUALITY_RANGE == (30, 100) and JPEG_PROB == 0.5
    assert BLUR_KERNELS == (3, 5) and BLUR_PROB == 0.5

    print("\nACCEPTANCE 10 (exporter conformance): PASS")


def test_two_image_high_dim_export(tmp_path):
    src = tmp_path / "imgs"
    src.mkdir()
    rng = np.random.default_rng(11)
    for i in range(2):
        arr = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
        Image.fromarray(arr).save(src / f"{i}.png")
    out = tmp_path / "wide.tfrb"
    result = extract(ExportConfig(
        encoder="toy-vit-p32-d1024-l0",
        resolution=64,
        sources=(SourceSpec(directory=str(src), label=0, tag="x"),),
        out_path=str(out),
    ))
    assert result.written == 2 and result.dim == 1024

    from tapdetect.featurestore import read_feature_file

    ds = read_feature_file(out)
    assert ds.dim == 1024
    assert all(r.n_tokens == (64 // 32) ** 2 + 1 for r in ds.records)
