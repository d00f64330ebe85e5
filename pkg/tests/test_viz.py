import numpy as np
import pytest

from meshalign import viz
from meshalign.correlation import FlowField
from meshalign.imaging import Image, constant_image
from meshalign.mesh import regular_mesh


def test_fuse_channels_and_orange_border():
    ref = Image(np.stack([np.full((4, 4), 0.8), np.full((4, 4), 0.6), np.full((4, 4), 0.4)]))
    warped = np.array(ref.data)
    warped[:, :, 2:] = 0.0  # right half has no target content
    out = viz.fuse(ref, Image(warped)).data
    np.testing.assert_allclose(out[:, 0, 0], [0.8, 0.6, 0.4])
    # reference-only: red kept, green halved, blue gone -> orange
    np.testing.assert_allclose(out[:, 0, 3], [0.8, 0.3, 0.0])
    gray = viz.fuse(constant_image(2, 2, 0.5), constant_image(2, 2, 0.5)).data
    np.testing.assert_allclose(gray, 0.5)
    with pytest.raises(ValueError):
        viz.fuse(ref, constant_image(3, 4, 0.5, channels=3))


def test_flow_colors():
    flow = np.zeros((2, 3, 2))
    flow[0, 0] = [2.0, 0.0]
    flow[0, 1] = [-1.0, 0.0]
    img = viz.flow_to_color(FlowField(flow)).data
    np.testing.assert_allclose(img[:, 0, 0], [1.0, 0.0, 0.0])  # +x at full magnitude is pure red
    np.testing.assert_allclose(img[:, 1, 2], 1.0)  # zero flow is white
    assert img[0, 0, 1] < img[2, 0, 1]  # -x leans cyan
    assert viz.flow_to_color(FlowField(np.zeros((2, 2, 2))), upscale=4).shape == (3, 8, 8)


def test_mesh_overlay_marks_vertices_and_edges():
    img = constant_image(17, 17, 0.0)
    out = viz.mesh_overlay(img, regular_mesh(2, 2, 16, 16), radius=0).data
    np.testing.assert_allclose(out[:, 8, 8], viz.VERTEX_COLOR)
    np.testing.assert_allclose(out[:, 8, 4], viz.EDGE_COLOR)
    np.testing.assert_allclose(out[:, 4, 4], 0.0)
    assert img.data.max() == 0.0
