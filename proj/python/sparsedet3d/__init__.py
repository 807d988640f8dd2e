# Copyright Contributors to the sparsedet3d project
# SPDX-License-Identifier: Apache-2.0
"""Sparse 3D detection: voxelization, sparse convolution, box geometry and the toy detector."""

from ._sparsedet3d import (
    Detector,
    RunConfig,
    decode_residual,
    encode_residual,
    eval_map,
    iou3d,
    load_scene,
    nms,
    sparse_conv,
    synth_scenes,
    voxelize,
)

__all__ = [
    "Detector",
    "RunConfig",
    "decode_residual",
    "encode_residual",
    "eval_map",
    "iou3d",
    "load_scene",
    "nms",
    "sparse_conv",
    "synth_scenes",
    "voxelize",
]
