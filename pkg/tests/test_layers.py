import numpy as np
import pytest

from capgen.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from capgen.errors import ContractError, FormatError, ShapeError, VocabularyError
from capgen.gradcheck import check_gradients
from capgen.layers import Embedding, Linear, LstmCell, dropout
from capgen.tensor import Tape, Tensor, backward, sum_all, zeros


def zeroed_cell(input_dim=1, hidden=1):
    cell = LstmCell(input_dim, hidden, np.random.default_rng(0))
    for p in cell.parameters().values():
        p.data[:] = 0.0
    return cell


class TestLstmCell:
    def test_all_zero_weights(self):
        cell = zeroed_cell()
        out = cell.step(Tensor([0.3]), zeros(1), zeros(1))
        # i = f = o = 0.5, g = 0 so both outputs vanish
        np.testing.assert_array_equal(out.h.data, [0.0])
        np.testing.assert_array_equal(out.m.data, [0.0])
        np.testing.assert_array_equal(out.i.data, [0.5])
        np.testing.assert_array_equal(out.f.data, [0.5])
        np.testing.assert_array_equal(out.o.data, [0.5])

    def test_saturated_forget_gate_preserves_memory(self):
        cell = zeroed_cell()
        cell.b_f.data[:] = 50.0
        out = cell.step(Tensor([0.0]), zeros(1), Tensor([1.0]))
        np.testing.assert_allclose(out.m.data, [1.0], atol=1e-3)

    def test_forget_bias_initialized_to_one(self, rng):
        cell = LstmCell(3, 4, rng)
        np.testing.assert_array_equal(cell.b_f.data, np.ones(4))
        np.testing.assert_array_equal(cell.b_i.data, np.zeros(4))

    def test_dimension_error_names_gate_block(self):
        cell = LstmCell(3, 4, np.random.default_rng(0))
        with pytest.raises(ShapeError, match="W_i"):
            cell.step(Tensor([1.0, 2.0]), zeros(4), zeros(4))
        with pytest.raises(ShapeError, match="U_i"):
            cell.step(Tensor([1.0, 2.0, 3.0]), zeros(3), zeros(4))

    def test_hidden_output_strictly_inside_unit_interval(self, rng):
        cell = LstmCell(5, 7, rng)
        for _ in range(20):
            out = cell.step(Tensor(rng.standard_normal(5) * 3),
                            Tensor(rng.standard_normal(7)),
                            Tensor(rng.standard_normal(7)))
            assert np.all(np.abs(out.h.data) < 1.0)

    def test_gradcheck_all_twelve_blocks(self, rng):
        cell = LstmCell(4, 4, rng)
        y = Tensor(rng.standard_normal(4))
        h0 = Tensor(rng.standard_normal(4))
        m0 = Tensor(rng.standard_normal(4))
        params = cell.parameters()
        assert len(params) == 12

        def loss():
            out = cell.step(y, h0, m0)
            return sum_all(out.h)

        assert check_gradients(loss, params) < 1e-4


class TestEmbedding:
    def test_identity_rows(self, rng):
        emb = Embedding(3, 3, rng)
        emb.E.data[:] = np.eye(3)
        np.testing.assert_array_equal(emb.lookup([2]).data, [[0.0, 0.0, 1.0]])

    def test_repeated_ids_accumulate_gradient(self, rng):
        emb = Embedding(3, 2, rng)
        with Tape():
            backward(sum_all(emb.lookup([0, 0])))
        np.testing.assert_array_equal(emb.E.grad[0], [2.0, 2.0])
        np.testing.assert_array_equal(emb.E.grad[1:], np.zeros((2, 2)))

    def test_out_of_range_id(self, rng):
        emb = Embedding(5, 2, rng)
        with pytest.raises(VocabularyError, match="7"):
            emb.lookup([1, 7])

    def test_gather_gradcheck(self, rng):
        emb = Embedding(6, 3, rng)
        assert check_gradients(lambda: sum_all(emb.lookup([4, 1, 4]) * emb.lookup([0, 2, 5])),
                               emb.parameters()) < 1e-4


class TestDropout:
    def test_inference_identity_bitwise(self, rng):
        x = Tensor(rng.standard_normal(100))
        assert dropout(x, 0.9, training=False) is x

    def test_rate_zero_identity(self, rng):
        x = Tensor(rng.standard_normal(10))
        assert dropout(x, 0.0, training=True, rng=rng) is x

    def test_invalid_rate(self):
        with pytest.raises(ContractError):
            dropout(Tensor([1.0]), 1.0, training=True, rng=np.random.default_rng(0))

    def test_inverted_scaling_keeps_mean(self):
        rng = np.random.default_rng(7)
        x = Tensor(np.ones(10_000))
        y = dropout(x, 0.5, training=True, rng=rng)
        assert 0.95 <= y.data.mean() <= 1.05
        survivors = y.data[y.data != 0.0]
        np.testing.assert_allclose(survivors, 2.0)


class TestLinear:
    def test_vector_and_matrix_application_agree(self, rng):
        lin = Linear(3, 2, rng)
        x = rng.standard_normal((4, 3))
        rowwise = lin(Tensor(x)).data
        single = np.stack([lin(Tensor(r)).data for r in x])
        np.testing.assert_allclose(rowwise, single, atol=1e-15)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        arrays = {"layer.W": rng.standard_normal((3, 4)),
                  "layer.b": rng.standard_normal(4),
                  "scalar": np.asarray(2.5)}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, "hlstmat_temporal", arrays)
        variant, loaded = load_checkpoint(path)
        assert variant == "hlstmat_temporal"
        assert set(loaded) == set(arrays)
        for k in arrays:
            np.testing.assert_array_equal(loaded[k], arrays[k])

    def test_magic_bytes(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, "da", {"w": np.zeros(2)})
        assert path.read_bytes()[:8] == MAGIC

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, "basic", {"w": np.ones(8)})
        data = path.read_bytes()
        path.write_bytes(data[:-12])
        with pytest.raises(FormatError, match="expected"):
            load_checkpoint(path)
