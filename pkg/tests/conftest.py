import numpy as np
import pytest
import torch

from duodet.backbone import ModelConfig
from duodet.core import BoundingBox, PairedSample, SampleMeta
from duodet.fixtures import make_toy_manifest

torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """Bundled 8-image synthetic paired dataset, imported into a manifest."""
    work = tmp_path_factory.mktemp("toyset")
    manifest_path, src = make_toy_manifest(work, n_images=8, image_size=128, seed=7)
    return manifest_path, src


@pytest.fixture
def tiny_model_cfg():
    """Smallest config that still exercises every branch."""
    return ModelConfig(
        num_classes=2,
        stem_channels=4,
        channels=(8, 8, 8),
        blocks_per_stage=1,
        fusion_heads=2,
        fusion_dim=None,
        aux_weights=(0.25, 0.25),
        conf_thresh=0.25,
        nms_iou=0.5,
    )


def finite_diff_check(
    f, leaves, n_coords=10, eps=1e-4, rtol=1e-3, seed=0
) -> None:
    """Compare autograd gradients against central differences.

    ``f`` is a closure returning a scalar tensor recomputed on every call;
    ``leaves`` are float64 tensors with requires_grad that f reads.
    ``n_coords`` random coordinates are sampled across all leaves.
    """
    value = f()
    grads = torch.autograd.grad(value, leaves)
    rng = np.random.Generator(np.random.PCG64(seed))
    sizes = [leaf.numel() for leaf in leaves]
    total = sum(sizes)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    for flat in picks:
        li = 0
        while flat >= sizes[li]:
            flat -= sizes[li]
            li += 1
        leaf = leaves[li]
        assert leaf.is_contiguous()
        with torch.no_grad():
            orig = leaf.view(-1)[flat].item()
            leaf.view(-1)[flat] = orig + eps
            f_plus = f().item()
            leaf.view(-1)[flat] = orig - eps
            f_minus = f().item()
            leaf.view(-1)[flat] = orig
        fd = (f_plus - f_minus) / (2 * eps)
        an = grads[li].reshape(-1)[flat].item()
        denom = max(abs(fd), abs(an))
        if denom < 1e-8:
            continue
        rel = abs(fd - an) / denom
        assert rel <= rtol, (
            f"leaf {li} coord {flat}: analytic {an:.6e} vs fd {fd:.6e} "
            f"(rel {rel:.2e})"
        )


def make_sample(
    h=64, w=64, boxes=None, seed=0, rgb=None, tir=None
) -> PairedSample:
    rng = np.random.Generator(np.random.PCG64(seed))
    if rgb is None:
        rgb = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint16).astype(np.uint8)
    if tir is None:
        tir = rng.integers(0, 256, size=(h, w, 1), dtype=np.uint16).astype(np.uint8)
    if boxes is None:
        boxes = [BoundingBox(8.0, 8.0, 24.0, 28.0, 0)]
    return PairedSample(
        rgb=rgb, tir=tir, boxes=list(boxes), meta=SampleMeta(source="test")
    )
