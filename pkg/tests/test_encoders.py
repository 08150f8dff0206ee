import numpy as np
import pytest

from refseg import encoders as enc
from refseg.params import named_tensors
from refseg.tensor import ShapeError, Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def test_pyramid_shapes_default_channels():
    params = enc.init_video_encoder(rng(), c1=96)
    clip = Tensor(rng(1).uniform(size=(2, 64, 64, 3)))
    pyr = enc.encode_video(clip, params)
    assert pyr.f4.shape == (2, 256, 96)
    assert pyr.f8.shape == (2, 64, 192)
    assert pyr.f16.shape == (2, 16, 384)


def test_zero_input_zero_params_gives_zero_pyramid():
    params = enc.init_video_encoder(rng(), c1=8)
    for _, t in named_tensors(params):
        t.data[...] = 0.0
    pyr = enc.encode_video(Tensor(np.zeros((1, 32, 32, 3))), params)
    for f in (pyr.f4, pyr.f8, pyr.f16):
        np.testing.assert_array_equal(f.data, np.zeros_like(f.data))


def test_encode_video_deterministic():
    params = enc.init_video_encoder(rng(3), c1=8)
    clip = Tensor(rng(4).uniform(size=(2, 32, 32, 3)))
    a = enc.encode_video(clip, params)
    b = enc.encode_video(clip, params)
    np.testing.assert_array_equal(a.f16.data, b.f16.data)
    np.testing.assert_array_equal(a.f4.data, b.f4.data)


def test_pyramid_shape_contract_random_sizes():
    g = rng(5)
    params = enc.init_video_encoder(g, c1=8)
    for _ in range(6):
        t = int(g.integers(1, 4))
        h = 16 * int(g.integers(1, 5))
        w = 16 * int(g.integers(1, 5))
        pyr = enc.encode_video(Tensor(g.uniform(size=(t, h, w, 3))), params)
        assert pyr.f4.shape == (t, (h // 4) * (w // 4), 8)
        assert pyr.f8.shape == (t, (h // 8) * (w // 8), 16)
        assert pyr.f16.shape == (t, (h // 16) * (w // 16), 32)


def test_encode_video_rejects_indivisible():
    params = enc.init_video_encoder(rng(), c1=8)
    with pytest.raises(ShapeError):
        enc.encode_video(Tensor(np.zeros((1, 30, 32, 3))), params)


def test_tokenize():
    assert enc.tokenize("The red Square, moving left!") == [
        "the", "red", "square", "moving", "left"]


def test_text_repeated_tokens_identical_rows():
    y = enc.encode_text(["cat", "cat"], width=96).data
    np.testing.assert_array_equal(y[0], y[1])


def test_text_rows_unit_norm():
    y = enc.encode_text(["a", "b", "zebra"], width=768).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), np.ones(3), atol=1e-12)


def test_text_permutation_swaps_rows():
    ab = enc.encode_text(["a", "b"], width=64).data
    ba = enc.encode_text(["b", "a"], width=64).data
    np.testing.assert_array_equal(ab[0], ba[1])
    np.testing.assert_array_equal(ab[1], ba[0])


def test_text_rejects_empty_and_too_long():
    with pytest.raises(ShapeError):
        enc.encode_text([], width=16)
    with pytest.raises(ShapeError):
        enc.encode_text(["x"] * 33, width=16)


def test_text_encoder_not_trainable():
    y = enc.encode_text(["tok"], width=32)
    assert not y.requires_grad


def test_fuse_shapes():
    g = rng(6)
    params = enc.init_video_encoder(g, c1=96)
    fuse = enc.init_fuse(g, c3=384, c_text=768, c=256)
    pyr = enc.encode_video(Tensor(g.uniform(size=(2, 64, 64, 3))), params)
    txt = enc.encode_text(["a", "b", "c", "d", "e"], width=768)
    x = enc.fuse_project(pyr, txt, fuse)
    assert x.shape == (2, 16 + 5, 256)


def test_fuse_zero_projections_zero_output():
    g = rng(7)
    params = enc.init_video_encoder(g, c1=8)
    fuse = enc.init_fuse(g, c3=32, c_text=24, c=16)
    fuse.visual_proj.data[...] = 0.0
    fuse.text_proj.data[...] = 0.0
    pyr = enc.encode_video(Tensor(g.uniform(size=(1, 32, 32, 3))), params)
    txt = enc.encode_text(["q"], width=24)
    x = enc.fuse_project(pyr, txt, fuse)
    np.testing.assert_array_equal(x.data, np.zeros_like(x.data))


def test_fuse_identity_projection_copies_visual_rows():
    g = rng(8)
    params = enc.init_video_encoder(g, c1=8)  # c3 = 32
    fuse = enc.init_fuse(g, c3=32, c_text=24, c=32)
    fuse.visual_proj.data[...] = np.eye(32)
    pyr = enc.encode_video(Tensor(g.uniform(size=(1, 32, 32, 3))), params)
    txt = enc.encode_text(["q"], width=24)
    x = enc.fuse_project(pyr, txt, fuse)
    np.testing.assert_array_equal(x.data[:, :4, :], pyr.f16.data)


def test_fuse_row_ordering_visual_then_text():
    g = rng(9)
    params = enc.init_video_encoder(g, c1=8)
    fuse = enc.init_fuse(g, c3=32, c_text=24, c=16)
    pyr = enc.encode_video(Tensor(np.zeros((2, 32, 32, 3))), params)
    txt = enc.encode_text(["a", "b"], width=24)
    # zero video params make the visual block identically zero
    for _, t in named_tensors(params):
        t.data[...] = 0.0
    pyr = enc.encode_video(Tensor(np.zeros((2, 32, 32, 3))), params)
    x = enc.fuse_project(pyr, txt, fuse).data
    np.testing.assert_array_equal(x[:, :4, :], np.zeros((2, 4, 16)))
    assert np.all(np.any(x[:, 4:, :] != 0, axis=-1))
    np.testing.assert_array_equal(x[0, 4:, :], x[1, 4:, :])
