import copy
import math

import numpy as np
import pytest
import torch
from torch import nn

from fd import central_diff, norm_rel_error
from trcv.model import (CKPT_MAGIC, EncoderConfig, EncoderOutput, TrCAMV, frame_to_tensor, import_encoder_weights, infer,
                        load_checkpoint, save_checkpoint, standardize)


def _model(seed=0, **kw):
    torch.manual_seed(seed)
    return TrCAMV(EncoderConfig(**kw)).eval()


def _images(rng, n=2, size=64):
    return [rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8) for _ in range(n)]


def _batch(images, size=64):
    return torch.stack([frame_to_tensor(im, size) for im in images])


def test_token_shapes(rng):
    m = _model()
    out = m.encode(_batch(_images(rng)))
    assert out.patch_tokens.shape == (2, 64, 32)
    assert out.cls_token.shape == (2, 32)


def test_zeroed_residual_branches_are_identity(rng):
    m = _model()
    for blk in m.blocks:
        for lin in (blk.attn.proj, blk.fc2):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
    x = _batch(_images(rng))
    with torch.no_grad():
        h = m.embed(x)
        out = m.encode(x)
    torch.testing.assert_close(out.cls_token, h[:, 0], rtol=0, atol=0)
    torch.testing.assert_close(out.patch_tokens, h[:, 1:], rtol=0, atol=0)


def test_distinct_frames_distinct_cls(rng):
    m = _model()
    with torch.no_grad():
        out = m.encode(_batch(_images(rng)))
    assert not torch.allclose(out.cls_token[0], out.cls_token[1])


def test_wrong_input_shape():
    with pytest.raises(ValueError, match="expected"):
        _model().encode(torch.zeros(1, 3, 32, 32))


def _with_class_bias(m, bias):
    nn.init.zeros_(m.classifier.weight)
    with torch.no_grad():
        m.classifier.bias.copy_(torch.tensor(bias))
    return m


def test_equal_logits_give_uniform(rng):
    m = _with_class_bias(_model(num_classes=10), [0.7] * 10)
    with torch.no_grad():
        p = m.classify(m.encode(_batch(_images(rng, 1))))
    np.testing.assert_allclose(p.numpy(), np.full((1, 10), 0.1), atol=1e-7)


def test_two_class_softmax(rng):
    m = _with_class_bias(_model(num_classes=2), [math.log(2), 0.0])
    with torch.no_grad():
        p = m.classify(m.encode(_batch(_images(rng, 1))))
    np.testing.assert_allclose(p.numpy(), [[2 / 3, 1 / 3]], atol=1e-6)


def test_localization_map_is_partition(rng):
    m = _model()
    with torch.no_grad():
        maps = m.localize(m.encode(_batch(_images(rng, 3))))
    assert maps.shape == (3, 2, 64, 64)
    np.testing.assert_allclose(maps.sum(dim=1).numpy(), 1.0, atol=1e-6)


def test_zero_logits_give_half(rng):
    m = _model()
    nn.init.zeros_(m.loc_head.out.weight)
    nn.init.zeros_(m.loc_head.out.bias)
    with torch.no_grad():
        maps = m.localize(m.encode(_batch(_images(rng, 1))))
    assert torch.all(maps == 0.5)


def test_grid_upsampling():
    m = _model()
    tokens = torch.randn(1, 64, 32)
    out = m.loc_head.logits(EncoderOutput(torch.randn(1, 32), tokens))
    assert out.shape == (1, 2, 64, 64)
    assert len(m.loc_head.stages) == 3


def test_infer_deterministic_and_batch_independent(rng):
    m = _model()
    frames = _images(rng, 2)
    p1, m1 = infer(m, frames)
    p2, m2 = infer(m, frames)
    assert p1.tobytes() == p2.tobytes()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(m1, m2))
    singles = [infer(m, [f]) for f in frames]
    for i, (ps, ms) in enumerate(singles):
        np.testing.assert_allclose(p1[i], ps[0], atol=1e-6)
        np.testing.assert_allclose(m1[i], ms[0], atol=1e-6)


def test_infer_resizes_back(rng):
    m = _model()
    frame = rng.integers(0, 256, size=(48, 80, 3), dtype=np.uint8)
    probs, maps = infer(m, [frame])
    assert probs.shape == (1, 3)
    assert maps[0].shape == (2, 48, 80)
    np.testing.assert_allclose(maps[0].sum(axis=0), 1.0, atol=1e-6)


def test_standardize():
    x = torch.rand(2, 3, 8, 8) * 5 + 3
    s = standardize(x)
    np.testing.assert_allclose(s.mean(dim=(-2, -1)).numpy(), 0.0, atol=1e-5)
    np.testing.assert_allclose(s.std(dim=(-2, -1), unbiased=False).numpy(), 1.0, atol=1e-4)
    assert torch.all(standardize(torch.full((3, 4, 4), 0.7)) == 0)


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    cfg = EncoderConfig(image_size=16, patch_size=8, depth=1, embed_dim=8, heads=2, num_classes=3,
                        mlp_ratio=2.0, decoder_channels=4)
    m = TrCAMV(cfg).double()
    # wake up every parameter so no gradient is trivially zero
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.1 * torch.randn_like(p))
    x = torch.randn(2, 3, 16, 16, dtype=torch.float64)
    wc = torch.randn(2, 3, dtype=torch.float64)
    wl = torch.randn(2, 2, 16, 16, dtype=torch.float64)

    def objective():
        cls, loc = m(x)
        return (wc * cls.log_softmax(-1)).sum() + (wl * loc.softmax(1)).sum()

    m.zero_grad()
    objective().backward()
    worst = 0.0
    for name, p in m.named_parameters():
        analytic = p.grad.detach().clone()
        data = p.data

        def f(t, data=data):
            data.copy_(t)
            return objective().item()

        with torch.no_grad():
            numeric = central_diff(f, data.clone())
        worst = max(worst, norm_rel_error(analytic, numeric))
    assert worst <= 1e-3


def _mirror(m):
    """Copy of ``m`` whose weights are mirrored so it sees horizontally flipped input."""
    f = copy.deepcopy(m)
    g = m.cfg.grid
    with torch.no_grad():
        f.patch_embed.weight.copy_(m.patch_embed.weight.flip(-1))
        grid = m.pos_embed[:, 1:].reshape(1, g, g, -1).flip(2).reshape(1, g * g, -1)
        f.pos_embed[:, 1:].copy_(grid)
        for dst, src in zip(f.loc_head.stages, m.loc_head.stages):
            dst.weight.copy_(src.weight.flip(-1))
    return f


def test_flip_equivariance():
    m = _model(seed=3)
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.05 * torch.randn_like(p))
    mirror = _mirror(m)
    x = torch.randn(2, 3, 64, 64)
    with torch.no_grad():
        a = m.encode(x)
        b = mirror.encode(x.flip(-1))
        torch.testing.assert_close(mirror.classify(b), m.classify(a), atol=1e-5, rtol=1e-5)
        torch.testing.assert_close(mirror.localize(b), m.localize(a).flip(-1), atol=1e-5, rtol=1e-5)


def test_without_encoder_classification_ignores_patches(rng):
    m = _model()
    m.blocks = nn.ModuleList()
    x = _batch(_images(rng, 2))
    with torch.no_grad():
        p = m.classify(m.encode(x))
    np.testing.assert_allclose(p[0].numpy(), p[1].numpy(), atol=1e-6)
    full = _model()
    with torch.no_grad():
        q = full.classify(full.encode(x))
    assert (q[0] - q[1]).abs().max() > 1e-4


def test_checkpoint_round_trip(tmp_path, rng):
    m = _model(seed=4)
    save_checkpoint(m, tmp_path / "a.ckpt", meta={"epoch": 3})
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw.startswith(CKPT_MAGIC)
    back, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert meta == {"epoch": 3}
    assert back.cfg == m.cfg
    frames = _images(rng, 2)
    pa, ma = infer(m, frames)
    pb, mb = infer(back, frames)
    assert pa.tobytes() == pb.tobytes()
    save_checkpoint(back, tmp_path / "b.ckpt", meta={"epoch": 3})
    assert (tmp_path / "b.ckpt").read_bytes() == raw


def test_bad_checkpoint(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"nope")
    with pytest.raises(ValueError, match="not a TRCV1"):
        load_checkpoint(tmp_path / "x.ckpt")


def test_import_encoder_weights():
    src, dst = _model(seed=1), _model(seed=2)
    loaded = import_encoder_weights(dst, {"backbone." + k: v for k, v in src.state_dict().items()},
                                    prefix="backbone.")
    assert "pos_embed" in loaded and not any(k.startswith("loc_head") for k in loaded)
    torch.testing.assert_close(dst.blocks[0].fc1.weight, src.blocks[0].fc1.weight)
    assert not torch.equal(dst.classifier.weight, src.classifier.weight)


@pytest.mark.parametrize("kw, msg", [
    ({"image_size": 60}, "divisible by patch"),
    ({"depth": 0}, "depth"),
    ({"embed_dim": 30}, "divisible by heads"),
    ({"image_size": 24, "patch_size": 6}, "power of two"),
])
def test_config_validation(kw, msg):
    with pytest.raises(ValueError, match=msg):
        EncoderConfig(**kw)
