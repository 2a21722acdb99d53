import numpy as np
import pytest
import torch

from embleak.encoders import (
    Adapter,
    AffineVictim,
    HashingBackbone,
    SurrogateModel,
    apply_adapter,
    encode_batch,
    get_backend,
    is_known_backend,
    register_backend,
)
from embleak.errors import BackendError, DimensionError, UsageError


def test_hashing_backbone_deterministic_and_shaped():
    a, b = HashingBackbone(16, 3), HashingBackbone(16, 3)
    texts = ["the cat sat", "a dog ran away"]
    ea, eb = a.encode(texts), b.encode(texts)
    assert ea.shape == (2, 16)
    assert torch.equal(ea, eb)
    assert not torch.equal(ea, HashingBackbone(16, 4).encode(texts))


def test_hashing_backbone_order_sensitive_through_bigrams():
    bb = HashingBackbone(16, 0)
    e = bb.encode(["cat dog", "dog cat"])
    assert not torch.allclose(e[0], e[1])


def test_hashing_backbone_frozen():
    assert not any(p.requires_grad for p in HashingBackbone(8).parameters())


def test_victim_noise_is_per_text_deterministic():
    v = AffineVictim(HashingBackbone(8, 0), 5, seed=2, noise=0.01)
    a = v.encode(["x y", "z"])
    b = v.encode(["z", "x y"])
    assert torch.equal(a[0], b[1]) and torch.equal(a[1], b[0])


def test_get_backend_toy_identifiers():
    assert get_backend("hash:12:1").dimension == 12
    assert get_backend("victim:20:1").dimension == 20
    with pytest.raises(UsageError):
        get_backend("hash:0:1")


def test_registry_and_known_backends():
    register_backend("unit-test-backend", lambda: HashingBackbone(4, 9))
    assert get_backend("unit-test-backend").dimension == 4
    assert is_known_backend("hash:4:1") and is_known_backend("org/model")
    assert not is_known_backend("nonsense")


def test_encode_batch_validation():
    bb = HashingBackbone(4)
    with pytest.raises(UsageError):
        encode_batch(bb, [])
    with pytest.raises(UsageError):
        encode_batch(bb, ["ok", "   "])


class Broken:
    name = "broken"
    dimension = 3

    def __init__(self, out):
        self.out = out

    def encode(self, texts):
        if isinstance(self.out, Exception):
            raise self.out
        return self.out


@pytest.mark.parametrize("out", [RuntimeError("boom"), torch.zeros(2, 4), torch.full((1, 3), float("nan"))])
def test_encode_batch_wraps_backend_failures(out):
    with pytest.raises(BackendError):
        encode_batch(Broken(out), ["a"])


def test_adapter_hand_case():
    ad = Adapter(2, 3)
    with torch.no_grad():
        ad.weight.copy_(torch.tensor([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]]))
        ad.bias.copy_(torch.tensor([0.5, 0.0, 1.0]))
    out = apply_adapter(ad, np.array([[1.0, 2.0]], dtype=np.float32))
    assert out.tolist() == [[1.5, 2.0, 1.0]]


def test_adapter_maps_batch_width():
    ad = Adapter(4, 6, torch.Generator().manual_seed(0))
    assert ad(torch.randn(3, 4)).shape == (3, 6)
    with pytest.raises(DimensionError):
        ad(torch.randn(3, 5))


def test_adapter_init_bounds():
    ad = Adapter(16, 8, torch.Generator().manual_seed(0))
    assert float(ad.weight.detach().abs().max()) <= 0.25
    assert float(ad.bias.detach().abs().max()) == 0.0


def test_surrogate_excludes_backbone_from_parameters():
    bb = HashingBackbone(8)
    s = SurrogateModel(bb, 5, torch.Generator().manual_seed(0))
    names = {n for n, _ in s.named_parameters()}
    assert names == {"adapter.weight", "adapter.bias"}
    assert set(s.state_dict()) == {"adapter.weight", "adapter.bias"}
    out = s(["hello there"])
    assert out.shape == (1, 5) and out.requires_grad
    out.sum().backward()
    assert bb.table.grad is None
