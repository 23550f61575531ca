"""Visual codec: patch features, motion pooling, frame decoding, SSIM."""

import numpy as np
import pytest

from vita.gradcheck import grad_check
from vita.tensor import Tensor, reduce_mean, reduce_sum, square
from vita.visual_codec import (
    FrameDecoder,
    MotionPooler,
    PatchEncoder,
    gaussian_window,
    psnr,
    ssim,
    visual_loss,
)

rng = np.random.default_rng(21)


def ssim_reference(x, y):
    """Direct windowed-formula evaluation with explicit loops."""
    g1 = gaussian_window()
    w2 = np.outer(g1, g1)
    c1, c2 = 0.01**2, 0.03**2
    h, w, c = x.shape
    vals = []
    for ch in range(c):
        for i in range(h - 6):
            for j in range(w - 6):
                px = x[i : i + 7, j : j + 7, ch]
                py = y[i : i + 7, j : j + 7, ch]
                mx, my = (w2 * px).sum(), (w2 * py).sum()
                vx = (w2 * px * px).sum() - mx * mx
                vy = (w2 * py * py).sum() - my * my
                vxy = (w2 * px * py).sum() - mx * my
                vals.append(((2 * mx * my + c1) * (2 * vxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_identity_and_symmetry():
    x = rng.random((16, 16, 3)).astype(np.float32)
    y = rng.random((16, 16, 3)).astype(np.float32)
    assert ssim(Tensor(x), Tensor(x)).item() == pytest.approx(1.0, abs=1e-6)
    assert ssim(Tensor(x), Tensor(y)).item() == pytest.approx(ssim(Tensor(y), Tensor(x)).item(), abs=1e-6)


def test_ssim_matches_reference_formula():
    for _ in range(10):
        x = rng.random((16, 16, 3))
        y = np.clip(x + rng.normal(0, 0.2, x.shape), 0, 1)
        got = ssim(Tensor(x.astype(np.float32)), Tensor(y.astype(np.float32))).item()
        assert got == pytest.approx(ssim_reference(x, y), abs=1e-5)


def test_ssim_bounded():
    for _ in range(10):
        x = rng.random((12, 12, 3)).astype(np.float32)
        y = rng.random((12, 12, 3)).astype(np.float32)
        v = ssim(Tensor(x), Tensor(y)).item()
        assert -1.0 < v <= 1.0 + 1e-6


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        ssim(Tensor(np.zeros((8, 8, 3))), Tensor(np.zeros((9, 9, 3))))


def test_visual_loss_values():
    x = rng.random((10, 10, 3)).astype(np.float32)
    assert visual_loss(Tensor(x), Tensor(x.copy())).item() == pytest.approx(0.0, abs=1e-7)
    shifted = np.clip(x + 0.1, None, 10.0).astype(np.float32)
    got = visual_loss(Tensor(shifted), Tensor(x), lambda_l1=2.0, lambda_ssim=0.0).item()
    assert got == pytest.approx(0.2, rel=1e-4)


def test_visual_loss_zero_iff_identical():
    x = rng.random((10, 10, 3)).astype(np.float32)
    y = x.copy()
    y[4, 4, 1] += 0.25
    assert visual_loss(Tensor(y), Tensor(x)).item() > 0.0


def test_visual_loss_gradient_matches_fd():
    tgt = rng.random((8, 8, 3))
    rep = grad_check(lambda t: visual_loss(t["p"], Tensor(tgt)), {"p": Tensor(rng.random((8, 8, 3)))},
                     tolerance=1e-3)
    assert rep.ok, str(rep)


def test_psnr_cap():
    x = rng.random((8, 8, 3))
    assert psnr(x, x) == 99.0
    assert psnr(x, np.clip(x + 0.1, 0, 1)) < 99.0


# -- modules ---------------------------------------------------------------------------


def make_stack(dtype=np.float32, frame=8, patch=4, channels=6, latent=5):
    r = np.random.default_rng(11)
    pe = PatchEncoder(frame, patch, channels, r, dtype=dtype)
    mp = MotionPooler(channels, latent, num_queries=2, query_dim=8, rng=r, dtype=dtype)
    fd = FrameDecoder(frame, patch, channels, latent, width=8, rng=r, dtype=dtype)
    return pe, mp, fd


def test_extract_shape_and_determinism():
    pe, _, _ = make_stack()
    frame = rng.random((8, 8, 3)).astype(np.float32)
    f1 = pe.extract(Tensor(frame))
    f2 = pe.extract(Tensor(frame))
    assert f1.shape == (2, 2, 6)
    np.testing.assert_array_equal(f1.data, f2.data)


def test_extract_wrong_size():
    pe, _, _ = make_stack()
    with pytest.raises(ValueError):
        pe.extract(Tensor(np.zeros((9, 9, 3), dtype=np.float32)))


def test_extract_gradient_matches_fd():
    pe, _, _ = make_stack(dtype=np.float64)
    frame = rng.random((8, 8, 3))

    def op(t):
        for name, val in t.items():
            setattr(pe, name, val)
        return reduce_mean(square(pe.extract(Tensor(frame))))

    rep = grad_check(op, dict(pe.params()))
    assert rep.ok, str(rep)


def test_motion_pool_shape_and_content_dependence():
    pe, mp, _ = make_stack()
    scene_a = rng.random((8, 8, 3)).astype(np.float32)
    scene_b = rng.random((8, 8, 3)).astype(np.float32)
    za = mp.pool(pe.extract(Tensor(scene_a)), pe.extract(Tensor(scene_a)))
    zb = mp.pool(pe.extract(Tensor(scene_b)), pe.extract(Tensor(scene_b)))
    assert za.shape == (5,)
    assert not np.allclose(za.data, zb.data)  # static scenes still content-dependent
    za2 = mp.pool(pe.extract(Tensor(scene_a)), pe.extract(Tensor(scene_a)))
    np.testing.assert_array_equal(za.data, za2.data)


def test_motion_pool_order_sensitivity():
    pe, mp, _ = make_stack()
    before = rng.random((8, 8, 3)).astype(np.float32)
    after = before.copy()
    after[2:5, 2:5] = rng.random((3, 3, 3))  # an object moved
    fa, fb = pe.extract(Tensor(before)), pe.extract(Tensor(after))
    z_fwd = mp.pool(fa, fb)
    z_rev = mp.pool(fb, fa)
    assert not np.allclose(z_fwd.data, z_rev.data)


def test_motion_pool_shape_mismatch():
    _, mp, _ = make_stack()
    with pytest.raises(ValueError):
        mp.pool(Tensor(np.zeros((2, 2, 6))), Tensor(np.zeros((2, 3, 6))))


def test_decode_frame_shape_and_range():
    pe, _, fd = make_stack()
    frame = rng.random((8, 8, 3)).astype(np.float32)
    feats = pe.extract(Tensor(frame))
    z = rng.normal(size=5).astype(np.float32) * 10
    out = fd.decode(feats, Tensor(z))
    assert out.shape == (8, 8, 3)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0
    assert np.isfinite(out.data).all()


def test_decode_frame_latent_mismatch():
    pe, _, fd = make_stack()
    feats = pe.extract(Tensor(rng.random((8, 8, 3)).astype(np.float32)))
    with pytest.raises(ValueError):
        fd.decode(feats, Tensor(np.zeros(7, dtype=np.float32)))


def test_decoder_gradient_matches_fd():
    pe, _, fd = make_stack(dtype=np.float64)
    feats = pe.extract(Tensor(rng.random((8, 8, 3)))).detach()
    z = rng.normal(size=5)

    def op(t):
        for name, val in t.items():
            setattr(fd, name, val)
        return reduce_mean(square(fd.decode(feats, Tensor(z))))

    rep = grad_check(op, dict(fd.params()))
    assert rep.ok, str(rep)


def test_warmup_path_finite_gradients():
    # extract -> pool -> straight-through -> decode -> loss, end to end
    from vita.quantizer import Codebook, quantize_straight_through_batch

    pe, mp, fd = make_stack()
    cb = Codebook(8, 5, np.random.default_rng(0))
    prev = Tensor(rng.random((2, 8, 8, 3)).astype(np.float32))
    nxt = Tensor(rng.random((2, 8, 8, 3)).astype(np.float32))
    fa, fb = pe.extract(prev), pe.extract(nxt)
    z = mp.pool(fa, fb)
    zq, _ = quantize_straight_through_batch(z, cb)
    pred = fd.decode(fa, zq)
    loss = visual_loss(pred, nxt)
    loss.backward()
    for params in (pe.params(), mp.params(), fd.params()):
        for name, p in params.items():
            assert p.grad is not None and np.isfinite(p.grad).all(), name
