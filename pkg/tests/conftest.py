import numpy as np
import pytest
import torch

from slicebrain.models import Checkpoint, VoxelwiseConfig, voxelwise_init


def randomized_voxelwise(seed: int, config: VoxelwiseConfig | None = None) -> Checkpoint:
    """Voxelwise checkpoint with random biases and batch-norm statistics, not just weights."""
    ckpt = voxelwise_init(config or VoxelwiseConfig(), seed)
    gen = torch.Generator().manual_seed(seed + 1000)
    for name, t in ckpt.tensors.items():
        if name.endswith(".running_var") or name.endswith(".bn_weight"):
            t.copy_(0.5 + torch.rand(t.shape, generator=gen))
        elif not name.endswith(".weight"):
            t.copy_(0.2 * torch.randn(t.shape, generator=gen))
    return ckpt


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
