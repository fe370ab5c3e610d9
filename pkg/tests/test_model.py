import numpy as np
import pytest
import torch

from bachi import numerics as nx
from bachi.model import MASKED, BACHIModel, ModelConfig
from bachi.training import compute_loss
from bachi.chord_vocab import FrameTargets, make_label

F64 = torch.float64


def tiny(**kw):
    base = dict(d_model=8, heads=2, encoder_layers=1, ffn_mult=2, context_radius=2, dropout=0.0)
    base.update(kw)
    return BACHIModel(ModelConfig(**base), seed=1, dtype=F64)


def random_frames(rng, T, B=None):
    shape = (T, 88) if B is None else (B, T, 88)
    return (rng.random(shape) < 0.1).astype(np.uint8)


# ---------------------------------------------------------------- geometry


@pytest.mark.parametrize("T", [6, 12, 600])
def test_patch_geometry(T):
    model = BACHIModel(ModelConfig(), seed=0)
    tokens = model.patch_embed(np.zeros((T, 88)))
    assert tokens.shape == (T // 6, 64)
    assert model.params["patch.W"].shape == (6, 88, 128)


def test_patch_rejects_ragged_length():
    with pytest.raises(ValueError, match="divisible"):
        tiny().patch_embed(np.zeros((7, 88)))


def test_forward_shapes_and_zero_roll():
    model = tiny()
    L = 5
    out = model.forward(np.zeros((2, 6 * L, 88)), np.full((2, L, 3), MASKED))
    assert out.boundary_logits.shape == (2, L)
    assert [lg.shape for lg in out.logits] == [(2, L, 13), (2, L, 15), (2, L, 13)]
    assert out.H.shape == out.Z.shape == (2, L, 8)
    assert all(torch.isfinite(lg).all() for lg in out.logits)


def test_param_count_desk():
    # recount from the layer shapes
    d, ff, r = 64, 256, 2
    attn = 4 * (d * d + d)
    enc = 2 * (2 * 2 * d + attn + d * ff + ff + ff * d + d) + 2 * d
    patch = 6 * 88 * 2 * d + 2 * d
    boundary = d * d + d + d + 1
    film = 2 * (d + 1) + 2 * ((d + 1) * d + d + d * d + d)
    dec = d + 3 * d + (13 + 15 + 13) * d + (2 * r + 2) * d + 3 * 2 * d + 2 * attn \
        + d * ff + ff + ff * d + d + 2 * d
    heads = (d + 1) * (13 + 15 + 13)
    assert BACHIModel(ModelConfig()).params.n_values() == patch + enc + boundary + film + dec + heads


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(d_model=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(context_radius=-1)
    cfg = ModelConfig(d_model=32, use_boundary=False)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- FiLM


def test_film_identity_when_mlps_zeroed():
    model = tiny()
    for name in model.params:
        if name.startswith(("film.gamma", "film.beta")):
            model.params.set(name, np.zeros(model.params[name].shape))
    rng = np.random.default_rng(3)
    H = torch.from_numpy(rng.normal(size=(3, 7, 8)))
    Z, gamma, beta = model.film_condition(H, torch.from_numpy(rng.random((3, 7))))
    mu = H.mean(-1, keepdim=True)
    var = ((H - mu) ** 2).mean(-1, keepdim=True)
    ref = (H - mu) / torch.sqrt(var + 1e-5)
    assert torch.allclose(Z, ref, atol=1e-6, rtol=0)
    assert not gamma.any() and not beta.any()


def test_film_uses_boundary_feature():
    model = tiny()
    H = torch.from_numpy(np.random.default_rng(0).normal(size=(4, 8)))
    Z0, _, _ = model.film_condition(H, torch.zeros(4))
    Z1, _, _ = model.film_condition(H, torch.ones(4))
    assert not torch.allclose(Z0, Z1)


def test_no_boundary_variant_is_plain_layer_norm():
    model = tiny(use_boundary=False)
    frames = random_frames(np.random.default_rng(0), 24)
    e, H, Z, C, _ = model.encode_pieces(frames)
    assert torch.allclose(Z, nx.layer_norm(H))
    out = model.forward(frames[None], np.full((1, 4, 3), MASKED))
    loss = sum(lg.sum() for lg in out.logits)
    nx.backward(loss, model.params)
    assert not model.params.grad("film.gamma.fc1.W").any()


# ---------------------------------------------------------------- context


def test_context_rows_and_zero_padding():
    model = tiny(context_radius=2)
    rng = np.random.default_rng(0)
    H = torch.from_numpy(rng.normal(size=(4, 8)))
    Z = torch.from_numpy(rng.normal(size=(4, 8)))
    C0 = model.assemble_context(Z, H, 0)
    assert C0.shape == (6, 8)
    assert torch.equal(C0[0], Z[0])
    assert not C0[1].any() and not C0[2].any()
    assert torch.equal(C0[3], H[0]) and torch.equal(C0[5], H[2])
    C3 = model.assemble_context(Z, H, 3)
    assert torch.equal(C3[2], H[2]) and not C3[4].any() and not C3[5].any()
    batched = model.assemble_contexts(Z[None], H[None])[0]
    for t in range(4):
        assert torch.equal(batched[t], model.assemble_context(Z, H, t))
    with pytest.raises(IndexError):
        model.assemble_context(Z, H, 4)


def test_padding_does_not_leak():
    model = tiny()
    rng = np.random.default_rng(5)
    short = random_frames(rng, 18)
    long = random_frames(rng, 36)
    alone = model.forward(short[None], np.full((1, 3, 3), MASKED))
    padded = np.zeros((2, 36, 88), dtype=np.uint8)
    padded[0, :18], padded[1] = short, long
    both = model.forward(padded, np.full((2, 6, 3), MASKED), lengths=[3, 6])
    for s in range(3):
        assert torch.allclose(both.logits[s][0, :3], alone.logits[s][0], atol=1e-10)
    assert torch.allclose(both.boundary_logits[0, :3], alone.boundary_logits[0], atol=1e-10)


def test_permutation_equivariance_without_positions():
    model = tiny(positional_encoding=False)
    rng = np.random.default_rng(2)
    frames = random_frames(rng, 30)
    perm = rng.permutation(5)
    permuted = frames.reshape(5, 6, 88)[perm].reshape(30, 88)
    H = model.encode(model.patch_embed(frames))
    Hp = model.encode(model.patch_embed(permuted))
    assert torch.allclose(Hp, H[perm], atol=1e-10)


# ---------------------------------------------------------------- decoder


def test_decode_step_couples_slots():
    model = tiny()
    C = torch.from_numpy(np.random.default_rng(0).normal(size=(1, 6, 8)))
    masked = model.decode_step(model.slot_inputs(torch.tensor([[MASKED] * 3])), C)
    committed = model.decode_step(model.slot_inputs(torch.tensor([[4, MASKED, MASKED]])), C)
    assert not torch.allclose(masked[1], committed[1])
    assert not torch.allclose(masked[2], committed[2])


def test_slot_inputs():
    model = tiny()
    X = model.slot_inputs(torch.tensor([[MASKED, 3, MASKED]]))
    P = model.params
    assert torch.equal(X[0, 0], P["dec.mask_emb"] + P["dec.slot_emb"][0])
    assert torch.equal(X[0, 1], P["dec.class_emb.quality"][3] + P["dec.slot_emb"][1])


def test_state_round_trip():
    a, b = tiny(), BACHIModel(tiny().config, seed=9, dtype=F64)
    b.load_state_arrays(a.state_arrays())
    frames = random_frames(np.random.default_rng(0), 12)[None]
    sv = np.full((1, 2, 3), MASKED)
    assert torch.equal(a.forward(frames, sv).logits[0], b.forward(frames, sv).logits[0])


def test_no_decay_names():
    names = tiny().no_decay_names()
    assert "dec.mask_emb" in names and "enc.0.ln1.g" in names and "head.root.b" in names
    assert "enc.0.attn.Wq" not in names and "patch.W" not in names


# ---------------------------------------------------------------- gradients


def test_end_to_end_gradient_finite_differences():
    """Full masked loss on a 2-token toy model against central differences."""
    model = BACHIModel(ModelConfig(d_model=4, heads=2, encoder_layers=1, ffn_mult=1, context_radius=1,
                                   dropout=0.0), seed=4, dtype=F64)
    rng = np.random.default_rng(11)
    frames = random_frames(rng, 12)[None]
    targets = FrameTargets.from_labels([make_label(0, "maj", 4), make_label(9, "min7")])
    mask = np.array([[True, False, True], [False, True, True]])
    slot_values = np.where(mask, MASKED, targets.as_array())[None]

    def loss_fn():
        out = model.forward(frames, slot_values)
        return compute_loss(out, targets, mask)[0]

    model.params.zero_grad()
    nx.backward(loss_fn(), model.params)
    h = 1e-6
    checked = 0
    for name, p in model.params.items():
        grad = model.params.grad(name).reshape(-1)
        flat = p.detach().reshape(-1)
        idx = rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False)
        for i in idx:
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + h
                fp = loss_fn().item()
                flat[i] = old - h
                fm = loss_fn().item()
                flat[i] = old
            num = (fp - fm) / (2 * h)
            ana = grad[i].item()
            assert abs(ana - num) <= 1e-3 * max(abs(ana), abs(num)) + 1e-8, (name, i, ana, num)
            checked += 1
    assert checked > 100
