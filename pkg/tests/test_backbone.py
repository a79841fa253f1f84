import pytest
import torch
from hypothesis import given, settings, strategies as st

from slenet.backbone import (
    Adapter,
    BackboneSpec,
    build_encoder,
    extract_features,
    is_adapter_param,
    parameter_digest,
)
from slenet.errors import ConfigError, ShapeError


def toy(**kw):
    return build_encoder(BackboneSpec(**kw))


@pytest.mark.parametrize("size,expected", [(352, (88, 44, 22, 11)), (64, (16, 8, 4, 2))])
def test_toy_stride_ladder(size, expected):
    enc = toy()
    pyr = extract_features(torch.rand(1, 3, size, size), enc)
    assert tuple(x.shape[-1] for x in pyr) == expected
    assert tuple(x.shape[1] for x in pyr) == (32, 64, 128, 256)


def test_toy_352_full_shapes():
    pyr = toy()(torch.rand(1, 3, 352, 352))
    assert [tuple(x.shape) for x in pyr] == [(1, 32, 88, 88), (1, 64, 44, 44), (1, 128, 22, 22), (1, 256, 11, 11)]


@pytest.mark.parametrize("shape", [(1, 3, 100, 100), (1, 3, 64, 96 + 1), (1, 3, 16, 16), (1, 1, 64, 64)])
def test_bad_input_rejected(shape):
    with pytest.raises(ShapeError):
        toy()(torch.rand(*shape))


def test_unknown_backbone():
    with pytest.raises(ConfigError):
        BackboneSpec(name="resnet")


def test_hiera_must_be_frozen():
    with pytest.raises(ConfigError):
        BackboneSpec(name="hiera-l", channels=None, frozen=False)


def test_hiera_missing_checkpoint_is_startup_error(tmp_path):
    spec = BackboneSpec(name="hiera-l", channels=None, frozen=True, checkpoint=str(tmp_path / "nope.pt"))
    with pytest.raises(ConfigError, match="checkpoint"):
        build_encoder(spec)


@settings(max_examples=10, deadline=None)
@given(h=st.integers(1, 4), w=st.integers(1, 4), b=st.integers(1, 2))
def test_stride_ladder_property(h, w, b):
    enc = toy(channels=(4, 8, 8, 8)).eval()
    pyr = enc(torch.rand(b, 3, 32 * h, 32 * w))
    for k, x in enumerate(pyr, start=1):
        assert x.shape[0] == b
        assert x.shape[-2:] == (32 * h // 2 ** (k + 1), 32 * w // 2 ** (k + 1))


def test_toy_deterministic():
    x = torch.rand(1, 3, 64, 64)
    torch.manual_seed(3)
    a = toy().eval()(x)
    torch.manual_seed(3)
    b = toy().eval()(x)
    for u, v in zip(a, b):
        assert torch.equal(u, v)


def test_toy_gradients_match_finite_differences():
    torch.manual_seed(0)
    enc = toy(channels=(4, 8, 8, 8), use_adapters=False).double().eval()
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64)

    def loss():
        return sum((lvl ** 2).mean() for lvl in enc(x))

    loss().backward()
    params = [p for p in enc.parameters()]
    for p in params:
        assert torch.isfinite(p.grad).all()
        assert p.grad.abs().sum() > 0
    gen = torch.Generator().manual_seed(1)
    for _ in range(3):
        p = params[torch.randint(len(params), (1,), generator=gen).item()]
        i = torch.randint(p.numel(), (1,), generator=gen).item()
        flat = p.data.view(-1)
        old = flat[i].item()
        h = 1e-6
        with torch.no_grad():
            flat[i] = old + h
            up = loss().item()
            flat[i] = old - h
            down = loss().item()
            flat[i] = old
        fd = (up - down) / (2 * h)
        an = p.grad.view(-1)[i].item()
        assert fd == pytest.approx(an, rel=1e-4, abs=1e-9)


def test_adapter_bottleneck_width():
    a = Adapter(1152, ratio=4)
    assert a.down.out_features == 288
    n = sum(p.numel() for p in a.parameters())
    assert n == 1152 * 288 + 288 + 288 * 1152 + 1152
    assert a(torch.randn(16, 1152)).shape == (16, 1152)


def test_adapter_zero_up_is_identity():
    a = Adapter(32, ratio=4)
    x = torch.randn(16, 32)
    assert torch.equal(a(x), x)


def test_adapter_formula():
    a = Adapter(8, ratio=2)
    torch.nn.init.normal_(a.up.weight)
    x = torch.randn(5, 8)
    expected = x + torch.nn.functional.gelu(a.up(torch.nn.functional.gelu(a.down(x))))
    assert torch.allclose(a(x), expected)


def test_adapter_dim_mismatch():
    with pytest.raises(ShapeError):
        Adapter(8)(torch.randn(3, 9))


def test_frozen_trainable_set_is_adapters():
    enc = toy(frozen=True)
    trainable = {n for n, p in enc.trunk.named_parameters() if p.requires_grad}
    assert trainable
    assert all(is_adapter_param(n) for n in trainable)
    assert trainable == {n for n, _ in enc.trunk.named_parameters() if is_adapter_param(n)}


def test_frozen_initial_output_equals_unadapted():
    torch.manual_seed(0)
    plain = toy(use_adapters=False).eval()
    adapted = toy(use_adapters=True, frozen=True).eval()
    # copy weights across the AdaptedBlock wrapper
    src = plain.state_dict()
    dst = adapted.state_dict()
    for k in dst:
        if ".adapter." not in k:
            dst[k] = src[k.replace(".block.", ".")]
    adapted.load_state_dict(dst)
    x = torch.rand(2, 3, 64, 64)
    for u, v in zip(plain(x), adapted(x)):
        assert torch.equal(u, v)


def test_frozen_step_changes_only_adapters():
    enc = toy(frozen=True)
    enc.train()
    before = parameter_digest(enc.frozen_parameters())
    adapters_before = [p.detach().clone() for p in enc.adapter_parameters()]
    opt = torch.optim.AdamW([p for p in enc.parameters() if p.requires_grad], lr=1e-2)
    loss = sum(x.mean() for x in enc(torch.rand(2, 3, 64, 64)))
    loss.backward()
    opt.step()
    assert parameter_digest(enc.frozen_parameters()) == before
    changed = sum(int(not torch.equal(a, p)) for a, p in zip(adapters_before, enc.adapter_parameters()))
    assert changed >= 1
