import math

import numpy as np
import pytest
import torch

from bachi import numerics as nx



@pytest.fixture(autouse=True)
def _float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def central_fd(f, x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """Central finite-difference gradient of scalar f at x (independent of autograd)."""
    g = torch.zeros_like(x)
    flat = x.detach().clone().reshape(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        fp = f(flat.reshape(x.shape)).item()
        flat[i] = old - h
        fm = f(flat.reshape(x.shape)).item()
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def autograd(f, x):
    x = x.detach().clone().requires_grad_(True)
    f(x).backward()
    return x.grad


def assert_grad_close(f, x, rtol=1e-4, atol=1e-7):
    np.testing.assert_allclose(autograd(f, x).numpy(), central_fd(f, x).numpy(), rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def rand(rng, *shape):
    return torch.tensor(rng.normal(size=shape))


# ---------------------------------------------------------------- linear


def naive_matmul(x, W, b):
    out = np.zeros((x.shape[0], W.shape[1]))
    for i in range(x.shape[0]):
        for j in range(W.shape[1]):
            acc = b[j]
            for k in range(W.shape[0]):
                acc += x[i, k] * W[k, j]
            out[i, j] = acc
    return out


def test_linear_examples(rng):
    x = torch.tensor([1.0, 2.0])
    assert nx.linear(x, torch.eye(2), torch.zeros(2)).tolist() == [1.0, 2.0]
    b = torch.tensor([0.5, -1.0])
    assert nx.linear(torch.zeros(2), rand(rng, 2, 2), b).tolist() == b.tolist()
    x, W, b = rand(rng, 3, 4), rand(rng, 4, 5), rand(rng, 5)
    np.testing.assert_allclose(nx.linear(x, W, b).numpy(), naive_matmul(x.numpy(), W.numpy(), b.numpy()), atol=1e-6)


def test_linear_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.linear(torch.zeros(2, 3), torch.zeros(4, 5), torch.zeros(5))


def test_linear_gradients(rng):
    x, W, b = rand(rng, 3, 4), rand(rng, 4, 2), rand(rng, 2)
    w = rand(rng, 3, 2)
    assert_grad_close(lambda x_: (nx.linear(x_, W, b) * w).sum(), x)
    assert_grad_close(lambda W_: (nx.linear(x, W_, b) * w).sum(), W)
    assert_grad_close(lambda b_: (nx.linear(x, W, b_) * w).sum(), b)


# ---------------------------------------------------------------- conv


def unfold_oracle(x, W, b, k=6):
    T, c_in = x.shape
    out = []
    for t0 in range(0, T, k):
        acc = b.copy()
        for dt in range(k):
            for c in range(c_in):
                acc = acc + x[t0 + dt, c] * W[dt, c]
        out.append(acc)
    return np.stack(out)


def test_conv_geometry():
    W, b = torch.zeros(6, 88, 8), torch.arange(8.0)
    for T in (6, 12, 600):
        assert nx.conv1d_patches(torch.zeros(T, 88), W, b).shape == (T // 6, 8)
    out = nx.conv1d_patches(torch.zeros(12, 88), torch.ones(6, 88, 8), b)
    assert torch.equal(out, b.expand(2, 8))
    with pytest.raises(ValueError, match="divisible"):
        nx.conv1d_patches(torch.zeros(13, 88), W, b)


@pytest.mark.parametrize("T,c_in,c_out", [(12, 4, 3), (6, 1, 1), (30, 5, 2)])
def test_conv_matches_unfold(rng, T, c_in, c_out):
    x, W, b = rand(rng, T, c_in), rand(rng, 6, c_in, c_out), rand(rng, c_out)
    np.testing.assert_allclose(nx.conv1d_patches(x, W, b).numpy(), unfold_oracle(x.numpy(), W.numpy(), b.numpy()),
                               atol=1e-10)


def test_conv_gradients(rng):
    x, W, b = rand(rng, 12, 3), rand(rng, 6, 3, 2), rand(rng, 2)
    w = rand(rng, 2, 2)
    assert_grad_close(lambda W_: (nx.conv1d_patches(x, W_, b) * w).sum(), W)
    assert_grad_close(lambda x_: (nx.conv1d_patches(x_, W, b) * w).sum(), x)


# ---------------------------------------------------------------- glu / layer norm


def test_glu(rng):
    v = rand(rng, 4)
    assert torch.allclose(nx.glu(torch.cat([v, torch.zeros(4)])), 0.5 * v)
    np.testing.assert_allclose(nx.glu(torch.cat([v, torch.full((4,), 20.0)])).numpy(), v.numpy(), atol=1e-6 * 3)
    x = rand(rng, 3, 6).numpy()
    expected = x[:, :3] / (1 + np.exp(-x[:, 3:]))
    np.testing.assert_allclose(nx.glu(torch.tensor(x)).numpy(), expected, rtol=1e-12)
    with pytest.raises(ValueError):
        nx.glu(torch.zeros(5))
    w = rand(rng, 3, 3)
    assert_grad_close(lambda x_: (nx.glu(x_) * w).sum(), torch.tensor(x))


def test_glu_saturated_gate_tolerance():
    v = torch.tensor([1.0, -2.0, 0.25])
    out = nx.glu(torch.cat([v, torch.full((3,), 20.0)]))
    # sigmoid(20) = 1 - 2.06e-9
    assert torch.allclose(out, v, atol=1e-6, rtol=0)


def test_layer_norm(rng):
    out = nx.layer_norm(torch.full((5,), 3.0), torch.ones(5), torch.full((5,), 0.5))
    assert torch.allclose(out, torch.full((5,), 0.5))
    y = nx.layer_norm(rand(rng, 4, 16) * 3 + 1, torch.ones(16), torch.zeros(16))
    np.testing.assert_allclose(y.mean(-1).numpy(), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(-1, unbiased=False).numpy(), 1, atol=1e-5 * 16)


def test_layer_norm_gradients(rng):
    x, g, b = rand(rng, 3, 5), rand(rng, 5), rand(rng, 5)
    w = rand(rng, 3, 5)
    assert_grad_close(lambda x_: (nx.layer_norm(x_, g, b) * w).sum(), x)
    assert_grad_close(lambda g_: (nx.layer_norm(x, g_, b) * w).sum(), g)
    assert_grad_close(lambda b_: (nx.layer_norm(x, g, b_) * w).sum(), b)


# ---------------------------------------------------------------- attention


def attn_params(rng, d):
    p = {}
    for k in "qkvo":
        p[f"W{k}"] = rand(rng, d, d) / math.sqrt(d)
        p[f"b{k}"] = rand(rng, d) * 0.1
    return p


def attention_loop_oracle(q_src, kv_src, p, heads):
    q_src, kv_src = q_src.numpy(), kv_src.numpy()
    P = {k: v.numpy() for k, v in p.items()}
    d = q_src.shape[1]
    dh = d // heads
    Q = q_src @ P["Wq"] + P["bq"]
    K = kv_src @ P["Wk"] + P["bk"]
    V = kv_src @ P["Wv"] + P["bv"]
    out = np.zeros((q_src.shape[0], d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(q_src.shape[0]):
            scores = np.array([Q[i, sl] @ K[j, sl] / math.sqrt(dh) for j in range(kv_src.shape[0])])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            out[i, sl] = sum(w[j] * V[j, sl] for j in range(kv_src.shape[0]))
    return out @ P["Wo"] + P["bo"]


def test_attention_matches_loop_oracle(rng):
    p = attn_params(rng, 8)
    q, kv = rand(rng, 4, 8), rand(rng, 5, 8)
    np.testing.assert_allclose(nx.multi_head_attention(q, kv, p, heads=2).numpy(),
                               attention_loop_oracle(q, kv, p, 2), atol=1e-5)
    x = rand(rng, 4, 8)
    np.testing.assert_allclose(nx.multi_head_attention(x, x, p, heads=4).numpy(),
                               attention_loop_oracle(x, x, p, 4), atol=1e-5)


def test_attention_single_key(rng):
    p = attn_params(rng, 8)
    q, kv = rand(rng, 3, 8), rand(rng, 1, 8)
    out, w = nx.multi_head_attention(q, kv, p, heads=2, return_weights=True)
    assert torch.equal(w, torch.ones_like(w))
    v = nx.linear(nx.linear(kv, p["Wv"], p["bv"]), p["Wo"], p["bo"])
    assert torch.allclose(out, v.expand(3, 8))


def test_attention_uniform_keys_and_row_sums(rng):
    p = attn_params(rng, 8)
    q = rand(rng, 3, 8)
    kv = rand(rng, 1, 8).expand(6, 8)
    _, w = nx.multi_head_attention(q, kv, p, heads=2, return_weights=True)
    np.testing.assert_allclose(w.numpy(), 1 / 6, atol=1e-12)
    _, w = nx.multi_head_attention(q, rand(rng, 7, 8), p, heads=4, return_weights=True)
    np.testing.assert_allclose(w.sum(-1).numpy(), 1.0, atol=1e-6)


def test_attention_heads_must_divide():
    with pytest.raises(ValueError, match="divisible"):
        nx.multi_head_attention(torch.zeros(2, 6), torch.zeros(2, 6), {}, heads=4)


def test_attention_gradients(rng):
    p = attn_params(rng, 4)
    q, kv = rand(rng, 3, 4), rand(rng, 2, 4)
    w = rand(rng, 3, 4)
    assert_grad_close(lambda q_: (nx.multi_head_attention(q_, kv, p, 2) * w).sum(), q)
    assert_grad_close(lambda k_: (nx.multi_head_attention(q, k_, p, 2) * w).sum(), kv)
    for name in ("Wq", "Wk", "Wv", "Wo", "bq", "bo"):
        def f(t, name=name):
            return (nx.multi_head_attention(q, kv, {**p, name: t}, 2) * w).sum()
        assert_grad_close(f, p[name])


# ---------------------------------------------------------------- softmax / losses


def test_softmax_and_losses():
    assert torch.allclose(nx.softmax(torch.zeros(3)), torch.full((3,), 1 / 3))
    logits = torch.zeros(1, 5)
    logits[0, 2] = 20.0
    assert nx.cross_entropy(logits, torch.tensor([2])).item() < 1e-6 * 5
    assert math.isclose(nx.binary_cross_entropy_with_logits(torch.tensor(0.0), torch.tensor(1.0)).item(),
                        math.log(2), rel_tol=1e-12)
    with pytest.raises(IndexError):
        nx.cross_entropy(torch.zeros(2, 3), torch.tensor([0, 3]))


def test_cross_entropy_margin_twenty():
    logits = torch.tensor([[20.0, 0.0, 0.0, 0.0]])
    assert nx.cross_entropy(logits, torch.tensor([0])).item() < 1e-6 * 6.2


def test_bce_stable_for_large_logits():
    x = torch.tensor([-800.0, 800.0])
    out = nx.binary_cross_entropy_with_logits(x, torch.tensor([0.0, 1.0]))
    assert torch.isfinite(out).all() and out.max() < 1e-300 + 1e-12


def test_softmax_rows_sum_to_one(rng):
    x = rand(rng, 10, 7) * 30
    np.testing.assert_allclose(nx.softmax(x).sum(-1).numpy(), 1, atol=1e-6)


def test_loss_gradients(rng):
    x = rand(rng, 4, 5)
    t = torch.tensor([0, 4, 2, 2])
    assert_grad_close(lambda x_: nx.cross_entropy(x_, t).sum(), x)
    y = torch.tensor([0.0, 1.0, 1.0, 0.0, 1.0])
    assert_grad_close(lambda x_: nx.binary_cross_entropy_with_logits(x_, y).sum(), x[0])
    assert_grad_close(lambda x_: (nx.gelu(x_) * x).sum(), x)


# ---------------------------------------------------------------- params, backward


def test_backward_dW_matches_fd(rng):
    ps = nx.ParamStore(torch.float64)
    W = ps.add("W", rng.normal(size=(3, 2)))
    unused = ps.add("unused", np.ones(4))
    x = rand(rng, 3)
    nx.backward((x @ W).sum(), ps)
    np.testing.assert_allclose(ps.grad("W").numpy(), central_fd(lambda W_: (x @ W_).sum(), W).numpy(), atol=1e-8)
    np.testing.assert_allclose(ps.grad("W").numpy(), np.outer(x.numpy(), np.ones(2)))
    assert torch.equal(ps.grad("unused"), torch.zeros(4))
    assert unused.grad is None


def test_backward_accumulates_and_rejects_non_scalar(rng):
    ps = nx.ParamStore(torch.float64)
    w = ps.add("w", [1.0, 2.0])
    nx.backward((w * w).sum() + w.sum(), ps)
    assert ps.grad("w").tolist() == [3.0, 5.0]
    with pytest.raises(ValueError, match="scalar"):
        nx.backward(w * 2, ps)


def test_backward_non_finite_loss():
    ps = nx.ParamStore(torch.float64)
    w = ps.add("w", [1.0])
    with pytest.raises(nx.NonFiniteError):
        nx.backward((w / 0.0).sum(), ps)


# ---------------------------------------------------------------- optimizer


def make_store(values, grads, dtype=torch.float64):
    ps = nx.ParamStore(dtype)
    for name, v in values.items():
        t = ps.add(name, v)
        t.grad = torch.as_tensor(np.asarray(grads[name]), dtype=dtype)
    return ps


def test_adamw_zero_grad_no_decay_keeps_params():
    ps = make_store({"a": [1.0, -2.0]}, {"a": [0.0, 0.0]})
    st = nx.OptimizerState.for_params(ps, weight_decay=0.0)
    nx.adamw_step(ps, st, lr=1e-2)
    assert ps["a"].tolist() == [1.0, -2.0]
    assert st.step == 1


def test_adamw_first_step_is_minus_lr():
    ps = make_store({"a": [0.5]}, {"a": [1.0]})
    st = nx.OptimizerState.for_params(ps, weight_decay=0.0)
    nx.adamw_step(ps, st, lr=1e-3)
    assert abs(ps["a"].item() - (0.5 - 1e-3)) < 1e-6 * 1e-3 + 1e-12


def adamw_reference(p, grads, lr, wd, b1=0.9, b2=0.98, eps=1e-9):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        p *= 1 - lr * wd
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adamw_weight_decay_matches_hand_formula():
    grads = [0.3, -1.2, 0.7, 0.0, 2.5]
    ps = make_store({"a": [1.5]}, {"a": [0.0]})
    st = nx.OptimizerState.for_params(ps, weight_decay=0.1)
    for g in grads:
        ps["a"].grad = torch.tensor([g], dtype=torch.float64)
        nx.adamw_step(ps, st, lr=0.05)
    assert math.isclose(ps["a"].item(), adamw_reference(1.5, grads, 0.05, 0.1), rel_tol=1e-12)
    # pure decay with zero gradient: scaled by (1 - lr*wd)
    ps = make_store({"a": [2.0]}, {"a": [0.0]})
    st = nx.OptimizerState.for_params(ps, weight_decay=0.1)
    nx.adamw_step(ps, st, lr=0.05)
    assert math.isclose(ps["a"].item(), 2.0 * (1 - 0.05 * 0.1), rel_tol=1e-12)


def test_adamw_nan_gradient_names_param():
    ps = make_store({"good": [1.0], "bad": [1.0]}, {"good": [0.0], "bad": [float("nan")]})
    st = nx.OptimizerState.for_params(ps)
    with pytest.raises(nx.NonFiniteError, match="bad"):
        nx.adamw_step(ps, st, lr=1e-3)


def test_lr_schedule():
    s = nx.LRSchedule(warmup_steps=100, total_steps=300, lr_min=1e-5, lr_max=1e-4)
    assert nx.lr_at_step(s, 0) == 0.0
    assert math.isclose(nx.lr_at_step(s, 50), 5e-5)
    assert nx.lr_at_step(s, 100) == 1e-4
    assert abs(nx.lr_at_step(s, 200) - 5.5e-5) < 1e-9
    assert nx.lr_at_step(s, 300) == 1e-5
    assert nx.lr_at_step(s, 10_000) == 1e-5
    with pytest.raises(ValueError):
        nx.LRSchedule(warmup_steps=10, total_steps=10)
    with pytest.raises(ValueError):
        nx.LRSchedule(warmup_steps=1, total_steps=10, lr_min=1e-3, lr_max=1e-4)


def test_clip_grad_norm():
    ps = make_store({"a": [0.6, 0.8]}, {"a": [0.6, 0.8]})
    assert nx.clip_grad_norm(ps, 2.0) == 1.0
    assert ps.grad("a").tolist() == [0.6, 0.8]
    ps = make_store({"a": [0.0, 0.0]}, {"a": [3.0, 4.0]})
    assert math.isclose(nx.clip_grad_norm(ps, 2.0), 0.4)
    np.testing.assert_allclose(ps.grad("a").numpy(), [1.2, 1.6])


def test_clip_grad_norm_random(rng):
    for _ in range(20):
        grads = {f"p{i}": rng.normal(size=rng.integers(1, 6)) * rng.uniform(0.1, 5) for i in range(4)}
        ps = make_store({k: np.zeros_like(v) for k, v in grads.items()}, grads)
        nx.clip_grad_norm(ps, 2.0)
        norm = math.sqrt(sum(float((ps.grad(k) ** 2).sum()) for k in grads))
        assert norm <= 2.0 + 1e-6


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"w": rng.normal(size=(3, 4)).astype(np.float32), "x": np.arange(5, dtype=np.float64),
               "rng": np.frombuffer(b"abc", dtype=np.uint8)}
    nx.save_checkpoint(tmp_path / "c.bin", tensors, {"step": 7})
    loaded, meta = nx.load_checkpoint(tmp_path / "c.bin")
    assert meta == {"step": 7}
    for k in tensors:
        assert loaded[k].dtype == tensors[k].dtype and np.array_equal(loaded[k], tensors[k])


def test_checkpoint_corruption_detected(tmp_path):
    nx.save_checkpoint(tmp_path / "c.bin", {"w": np.ones(4, np.float32)}, {})
    blob = bytearray((tmp_path / "c.bin").read_bytes())
    blob[-6] ^= 0xFF
    (tmp_path / "bad.bin").write_bytes(bytes(blob))
    with pytest.raises(nx.CheckpointError, match="checksum"):
        nx.load_checkpoint(tmp_path / "bad.bin")
    (tmp_path / "junk.bin").write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(nx.CheckpointError):
        nx.load_checkpoint(tmp_path / "junk.bin")
    (tmp_path / "short.bin").write_bytes(bytes(blob[:20]))
    with pytest.raises(nx.CheckpointError):
        nx.load_checkpoint(tmp_path / "short.bin")
