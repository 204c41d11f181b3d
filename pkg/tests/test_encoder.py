import numpy as np
import pytest

from protokd.augment import make_rng
from protokd.autodiff import Tensor
from protokd.encoder import (
    Checkpoint,
    CheckpointError,
    EncoderConfig,
    StudentHead,
    WideResNet,
    load_checkpoint,
    save_checkpoint,
    student_logits,
)
from protokd.losses import compute_prototypes, discriminative_loss, distill_loss, matching_loss

SMALL = EncoderConfig(depth=10, width_factor=1, embed_dim=16, input_size=8, dropout_rate=0.3)


def _batch(b=2, cfg=SMALL, seed=0):
    return make_rng(seed).random((b, cfg.in_channels, cfg.input_size, cfg.input_size)).astype(np.float32)


def _closed_form_count(cin, k, embed):
    w0, w1, w2, w3 = 16, 16 * k, 32 * k, 64 * k
    n = w0 * cin * 9
    for a, b in ((w0, w1), (w1, w2), (w2, w3)):
        n += 2 * a + a * b * 9 + 2 * b + b * b * 9
        if a != b or (a, b) != (w0, w1):
            n += a * b  # 1x1 projection shortcut on width or stride change
    n += 2 * w3 + w3 * embed + embed
    return n


def test_embed_shape():
    enc = WideResNet(SMALL, make_rng(0))
    out = enc.embed(_batch())
    assert out.shape == (2, 16)


def test_eval_mode_deterministic_and_train_mode_stochastic():
    enc = WideResNet(SMALL, make_rng(0))
    x = _batch(3)
    assert np.array_equal(enc.embed(x).data, enc.embed(x).data)
    a = enc.embed(x, training=True, rng=make_rng(1)).data
    b = enc.embed(x, training=True, rng=make_rng(2)).data
    assert not np.array_equal(a, b)


def test_duplicate_and_permuted_rows():
    enc = WideResNet(SMALL, make_rng(0), dtype=np.float64)
    x = _batch(3).astype(np.float64)
    base = enc.embed(x).data
    dup = enc.embed(np.concatenate([x, x[1:2]])).data
    np.testing.assert_allclose(dup[3], dup[1], rtol=0, atol=1e-12)
    perm = enc.embed(x[[2, 0, 1]]).data
    np.testing.assert_allclose(perm, base[[2, 0, 1]], rtol=0, atol=1e-12)


def test_parameter_count_closed_form():
    enc = WideResNet(EncoderConfig(depth=10, width_factor=1, embed_dim=64, input_size=32), make_rng(0))
    assert enc.num_parameters() == _closed_form_count(3, 1, 64) == 81360
    enc2 = WideResNet(EncoderConfig(depth=10, width_factor=2, embed_dim=32, input_size=16, in_channels=1), make_rng(0))
    assert enc2.num_parameters() == _closed_form_count(1, 2, 32)


@pytest.mark.parametrize(
    "kwargs",
    [{"depth": 12}, {"depth": 4}, {"input_size": 30}, {"embed_dim": 1}, {"dropout_rate": 1.0}],
)
def test_invalid_encoder_config(kwargs):
    with pytest.raises(ValueError):
        EncoderConfig(**kwargs)


def test_input_validation():
    enc = WideResNet(SMALL, make_rng(0))
    with pytest.raises(ValueError, match="channels"):
        enc.embed(np.zeros((1, 1, 8, 8), np.float32))
    with pytest.raises(ValueError, match="spatial size"):
        enc.embed(np.zeros((1, 3, 12, 12), np.float32))


def test_student_logits_oracles():
    rng = make_rng(3)
    head = StudentHead(5, 4, rng, dtype=np.float64)
    e = rng.standard_normal((6, 5))
    want = np.array([[sum(e[i, k] * head.weight.data[j, k] for k in range(5)) + head.bias.data[j] for j in range(4)] for i in range(6)])
    np.testing.assert_allclose(student_logits(Tensor(e), head).data, want, atol=1e-6)
    head.weight.data[:] = 0
    head.bias.data[:] = 0
    assert np.all(student_logits(Tensor(e), head).data == 0)
    sq = StudentHead(4, 4, rng, dtype=np.float64)
    sq.weight.data = np.eye(4)
    sq.bias.data[:] = 0
    e4 = rng.standard_normal((3, 4))
    np.testing.assert_allclose(student_logits(Tensor(e4), sq).data, e4)
    with pytest.raises(ValueError, match="does not match"):
        student_logits(Tensor(e4), head)


def _grads_for(loss_name):
    cfg = EncoderConfig(depth=10, width_factor=1, embed_dim=8, input_size=8, dropout_rate=0.0)
    enc = WideResNet(cfg, make_rng(0), dtype=np.float64)
    head = StudentHead(8, 3, make_rng(1), dtype=np.float64)
    x = _batch(9, cfg, 5).astype(np.float64)
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2])
    emb = enc.embed(x, training=True, rng=make_rng(2))
    protos = compute_prototypes(emb[:3], labels[:3], [0, 1, 2])
    q = emb[3:]
    if loss_name == "matching":
        loss = matching_loss(q, protos, labels[3:])
    elif loss_name == "distill":
        teacher = np.full((6, 3), 1 / 3)
        teacher[:, 0] += 0.2
        teacher[:, 1] -= 0.2
        loss = distill_loss(teacher, student_logits(q, head), 5.0)
    else:
        loss = discriminative_loss(q, protos, labels[3:])
    loss.backward()
    return enc


@pytest.mark.parametrize("loss_name", ["matching", "distill", "discriminative"])
def test_every_encoder_parameter_receives_gradient(loss_name):
    enc = _grads_for(loss_name)
    for name, p in enc.params.items():
        assert p.grad is not None, name
        assert np.abs(p.grad).max() > 0, name


def test_checkpoint_round_trip(tmp_path):
    enc = WideResNet(SMALL, make_rng(0))
    head = StudentHead(16, 3, make_rng(1))
    protos = make_rng(2).standard_normal((3, 16)).astype(np.float32)
    ck = Checkpoint(SMALL, enc.state_dict(), head.state_dict(), protos, ["a", "b", "c"], meta={"k": 1})
    path = tmp_path / "m.ckpt"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    assert back.encoder_config == SMALL
    assert back.class_names == ["a", "b", "c"] and back.meta == {"k": 1}
    assert np.array_equal(back.prototypes, protos)
    for k, v in ck.encoder_state.items():
        assert np.array_equal(back.encoder_state[k], v) and back.encoder_state[k].dtype == v.dtype
    x = _batch(2)
    assert np.array_equal(back.build_encoder().embed(x).data, enc.embed(x).data)
    # saving is a pure function of content
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.ckpt")
    (tmp_path / "junk").write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "junk")


def test_load_state_dict_rejects_mismatch():
    enc = WideResNet(SMALL, make_rng(0))
    state = enc.state_dict()
    state.pop("proj.bias")
    with pytest.raises(KeyError, match="proj.bias"):
        enc.load_state_dict(state)
