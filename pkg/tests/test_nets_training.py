import struct

import numpy as np
import pytest

from velocity_edit import autodiff as ad
from velocity_edit.toy.nets import (MAGIC, CheckpointError, DenseVelocityNet, SparseSampler, SparseTokenField,
                                    ToyNet, load_checkpoint)
from velocity_edit.toy.shapes import ShapeParams, embed_condition, gen_shape
from velocity_edit.toy.training import (Batch, FixedDataset, ShapeDataset, TrainingDiverged, cfm_loss,
                                        train_flow_matching, write_loss_csv)


@pytest.fixture
def small_dense():
    return ToyNet("dense", 64, hidden=16, seed=3, R=8)


def test_checkpoint_round_trip(tmp_path, small_dense):
    path = tmp_path / "net.bin"
    small_dense.save(path)
    back = load_checkpoint(path, R=8)
    assert back.kind == "dense" and back.hidden == 16
    for a, b in zip(small_dense.params, back.params):
        assert np.array_equal(a, b)


def test_checkpoint_layout(tmp_path):
    net = ToyNet("geometry", 4, hidden=5, seed=0)
    path = tmp_path / "g.bin"
    net.save(path)
    data = path.read_bytes()
    assert data[:8] == MAGIC
    assert struct.unpack_from("<I", data, 8)[0] == 3
    rows, cols = struct.unpack_from("<II", data, 12)
    assert (rows, cols) == (net.in_main + 8, 5)
    w1 = np.frombuffer(data, "<f8", rows * cols, 20).reshape(rows, cols)
    assert np.array_equal(w1, np.vstack(net.params[:2]))
    assert struct.unpack_from("<I", data, len(data) - 4)[0] == 8


@pytest.mark.parametrize("mutate", [
    lambda d: b"NOTATOY!" + d[8:],
    lambda d: d[:-9],
    lambda d: d + b"\0",
])
def test_malformed_checkpoints_rejected(tmp_path, small_dense, mutate):
    path = tmp_path / "net.bin"
    small_dense.save(path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(CheckpointError):
        load_checkpoint(path, R=8)


def test_dense_field_tape_matches_plain_evaluation(small_dense, rng):
    f = DenseVelocityNet(small_dense)
    xb, e = rng.standard_normal((3, 64)), rng.standard_normal(8)
    tape = ad.Tape()
    node = f.on_tape(tape, xb, 0.4, tape.const(e))
    assert np.array_equal(node.value, f.velocity(xb, 0.4, e))
    assert f(xb[0].reshape(1, 8, 8), 0.4, e).shape == (1, 8, 8)


def test_dense_field_embedding_gradient(small_dense, rng):
    f = DenseVelocityNet(small_dense)
    xb, e, w = rng.standard_normal((2, 64)), rng.uniform(-1, 1, 8), rng.standard_normal((2, 64))
    tape = ad.Tape()
    p = tape.param(e)
    loss = ad.sum(ad.mul(f.on_tape(tape, xb, 0.7, p), tape.const(w)))
    g = ad.backward(tape, loss)[p.id]
    h = 1e-5
    fd = np.array([(np.sum(f.velocity(xb, 0.7, e + h * u) * w) - np.sum(f.velocity(xb, 0.7, e - h * u) * w)) / (2 * h)
                   for u in np.eye(8)])
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) <= 1e-4


def test_sparse_field_requires_geometry_for_material():
    coords = gen_shape(ShapeParams(0.3)).geom.coords
    with pytest.raises(ValueError):
        SparseTokenField(ToyNet("material", 4, hidden=8), coords)
    with pytest.raises(ValueError):
        SparseTokenField(ToyNet("geometry", 4, hidden=8), coords, geometry=np.zeros((len(coords), 4)))


def test_sparse_sampler_counts_and_is_deterministic(rng):
    shape = gen_shape(ShapeParams(0.3))
    s = SparseSampler(ToyNet("geometry", 4, hidden=8), steps=5)
    eps = rng.standard_normal((len(shape.geom), 4))
    c = embed_condition(ShapeParams(0.3))
    a, b = s(shape.geom.coords, eps, c), s(shape.geom.coords, eps, c)
    assert s.calls == 2
    assert np.array_equal(a.feats, b.feats) and np.array_equal(a.coords, shape.geom.coords)


# -- training -------------------------------------------------------------------

def test_zero_steps_leave_weights_unchanged(small_dense):
    ds = ShapeDataset("dense", R=8, size=4, bank_size=8)
    res = train_flow_matching(small_dense, ds, 0)
    assert res.losses == []
    for a, b in zip(small_dense.params, res.net.params):
        assert np.array_equal(a, b)


def test_training_is_seed_deterministic_and_does_not_mutate_input(small_dense):
    ds = ShapeDataset("dense", R=8, size=4, bank_size=8)
    before = [p.copy() for p in small_dense.params]
    a = train_flow_matching(small_dense, ds, 5, seed=2)
    b = train_flow_matching(small_dense, ds, 5, seed=2)
    assert a.losses == b.losses
    for p, q, r in zip(a.net.params, b.net.params, before):
        assert np.array_equal(p, q)
    for p, r in zip(small_dense.params, before):
        assert np.array_equal(p, r)


def test_memorizes_a_single_regression_pair():
    batch = ShapeDataset("dense", size=1, cond_dropout=0.0, bank_size=1).batch(np.random.default_rng(3))
    net = ToyNet("dense", 576, hidden=32, seed=0)
    res = train_flow_matching(net, FixedDataset(batch), 2000)
    assert cfm_loss(res.net, batch) <= 1e-3 < cfm_loss(net, batch)


def test_sparse_batches_have_consistent_rows():
    for kind in ("geometry", "material"):
        b = ShapeDataset(kind, size=2, bank_size=4).batch(np.random.default_rng(0))
        n = len(b.target)
        assert b.main.shape[0] == b.cond.shape[0] == b.state.shape[0] == b.t.shape[0] == n
        assert b.main.shape[1] == ToyNet(kind, 4, hidden=4).in_main


def test_divergence_is_reported(small_dense):
    ds = ShapeDataset("dense", R=8, size=2, bank_size=2).batch(np.random.default_rng(0))
    bad = Batch(ds.main, ds.cond, np.full_like(ds.target, np.nan), ds.state, ds.t)
    with pytest.raises(TrainingDiverged):
        train_flow_matching(small_dense, FixedDataset(bad), 3)


def test_loss_csv(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_csv(path, [1.5, 0.25])
    assert path.read_text().splitlines() == ["step,loss", "0,1.5", "1,0.25"]
