import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from canvasweave.errors import CheckpointError, ShapeError
from canvasweave.model import (
    EncoderSpec,
    InceptionBlock,
    InceptionEncoder,
    SiameseNet,
    embed,
    load_checkpoint,
    pairwise_distance,
    save_checkpoint,
    siamese_forward,
)

TINY = EncoderSpec(stage_filters=(2, 2, 3, 3, 4), conv_filters=4, fc_widths=(16, 8), embedding_dim=6)


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    return SiameseNet(spec=TINY).eval()


def test_block_channels():
    out = InceptionBlock(1, 8)(torch.rand(2, 1, 100, 100))
    assert out.shape == (2, 24, 100, 100)


def test_block_zero_input_eval():
    block = InceptionBlock(3, 4).eval()
    out = block(torch.zeros(1, 3, 20, 20))
    assert torch.count_nonzero(out) == 0


def test_block_too_small():
    with pytest.raises(ShapeError):
        InceptionBlock(1, 2)(torch.rand(1, 1, 3, 3))


@pytest.mark.parametrize("n", [1, 5, 8, 32])
def test_block_channels_divisible_by_3(n):
    assert InceptionBlock(2, n)(torch.rand(1, 2, 9, 9)).shape[1] % 3 == 0


def test_default_stage_shapes():
    spec = EncoderSpec()
    enc = InceptionEncoder(spec)
    shapes = enc.stage_shapes()
    assert [s[1] for s in shapes] == [3 * n for n in spec.stage_filters] == [24, 48, 96, 96, 192]
    assert [s[2] for s in shapes] == [100, 50, 25, 12, 6]
    assert spec.final_side() == 3
    assert enc(torch.rand(2, 1, 100, 100)).shape == (2, 128)
    # Five inception stages + one plain conv + the dense head.
    assert len(enc.stages) == 5
    linears = [m for m in enc.head if isinstance(m, torch.nn.Linear)]
    assert [l.out_features for l in linears] == [1024, 256, 128]
    assert isinstance(enc.head[-1], torch.nn.Linear)  # linear output


def test_embed_deterministic(tiny_model, rng):
    x = rng.random((3, 100, 100))
    a = embed(tiny_model, x)
    b = embed(tiny_model, x)
    assert np.array_equal(a, b)
    assert a.shape == (3, 6) and np.all(np.isfinite(a))


def test_identical_instances_identical_embeddings(tiny_model, rng):
    x = rng.random((100, 100))
    v = embed(tiny_model, np.stack([x, x]))
    assert np.array_equal(v[0], v[1])


def test_augmented_copy_differs(tiny_model, rng):
    x = rng.random((100, 100))
    v = embed(tiny_model, np.stack([x, np.rot90(x)]))
    assert not np.allclose(v[0], v[1])


def test_embed_bad_shape(tiny_model, rng):
    with pytest.raises(ShapeError):
        embed(tiny_model, rng.random((2, 90, 100)))


def test_encoder_bad_shape():
    with pytest.raises(ShapeError):
        InceptionEncoder(TINY)(torch.rand(1, 3, 100, 100))


def test_nonfinite_params_rejected(rng):
    m = SiameseNet(spec=TINY)
    with torch.no_grad():
        next(m.parameters())[0].fill_(float("nan"))
    with pytest.raises(CheckpointError):
        embed(m, rng.random((1, 100, 100)))


def test_distance_basics(rng):
    assert pairwise_distance([0, 0], [3, 4]) == 5.0
    v = rng.normal(size=10)
    assert pairwise_distance(v, v) == 0.0
    with pytest.raises(ShapeError):
        pairwise_distance([1, 2], [1, 2, 3])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 64), st.integers(0, 2**31))
def test_distance_symmetry(dim, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=dim), r.normal(size=dim)
    assert pairwise_distance(a, b) == pairwise_distance(b, a)
    assert pairwise_distance(a, b) == pytest.approx(np.sqrt(sum((x - y) ** 2 for x, y in zip(a, b))))
    assert (pairwise_distance(a, b) == 0) == np.array_equal(a, b)


def test_siamese_self_zero_and_symmetric(tiny_model, rng):
    a, b = rng.random((100, 100)), rng.random((100, 100))
    assert siamese_forward(tiny_model, a, a) == 0.0
    assert siamese_forward(tiny_model, a, b) == siamese_forward(tiny_model, b, a)


def test_siamese_nonnegative_fuzz(tiny_model):
    r = np.random.default_rng(5)
    xa = torch.as_tensor(r.random((1000, 1, 100, 100)), dtype=torch.float32)
    xb = torch.as_tensor(r.random((1000, 1, 100, 100)), dtype=torch.float32)
    with torch.no_grad():
        out = torch.cat([tiny_model(xa[i : i + 250], xb[i : i + 250]) for i in range(0, 1000, 250)])
    assert out.shape == (1000,)
    assert torch.all(out >= 0)


def test_weight_tying(rng):
    m = SiameseNet(spec=TINY).eval()
    params = list(m.parameters())
    # A single parameter set: every tensor belongs to the one encoder.
    assert {id(p) for p in params} == {id(p) for p in m.encoder.parameters()}
    xa = torch.as_tensor(rng.random((2, 1, 100, 100)), dtype=torch.float32)
    xb = torch.as_tensor(rng.random((2, 1, 100, 100)), dtype=torch.float32)
    with torch.no_grad():
        before_a, before_b = m.embed_pair(xa, xb)
        m.encoder.head[-1].bias.add_(1.0)
        after_a, after_b = m.embed_pair(xa, xb)
    torch.testing.assert_close(after_a - before_a, torch.ones_like(before_a))
    torch.testing.assert_close(after_b - before_b, torch.ones_like(before_b))


def test_repeated_forward_bitwise(tiny_model, rng):
    x = torch.as_tensor(rng.random((4, 1, 100, 100)), dtype=torch.float32)
    with torch.no_grad():
        assert torch.equal(tiny_model.encoder(x), tiny_model.encoder(x))


def test_checkpoint_roundtrip(tmp_path, tiny_model, rng):
    tiny_model.preprocess_hash = "abc"
    save_checkpoint(tiny_model, tmp_path / "m.pt", {"seed": 3, "epoch": 7, "val_loss": 0.1})
    back = load_checkpoint(tmp_path / "m.pt")
    x = rng.random((2, 100, 100))
    assert np.array_equal(embed(back, x), embed(tiny_model, x))
    assert back.spec == TINY
    assert back.preprocess_hash == "abc"
    assert back.metadata["epoch"] == 7
    blob = torch.load(tmp_path / "m.pt", weights_only=True)
    assert blob["version"] == 1


def test_checkpoint_errors(tmp_path, tiny_model):
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.pt")
    torch.save({"state_dict": {}}, tmp_path / "nover.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nover.pt")
    m = SiameseNet(spec=TINY)
    with torch.no_grad():
        next(m.parameters()).fill_(float("inf"))
    save_checkpoint(m, tmp_path / "inf.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "inf.pt")


def test_pluggable_backbone(rng):
    class Flat(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.spec = EncoderSpec(embedding_dim=3)
            self.lin = torch.nn.Linear(100 * 100, 3)

        def forward(self, x):
            return self.lin(x.flatten(1))

    m = SiameseNet(encoder=Flat())
    v = embed(m, rng.random((2, 100, 100)))
    assert v.shape == (2, 3)
