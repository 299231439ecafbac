import math

import numpy as np
import pytest

from specfuse import hsicube as hc
from specfuse import mdnnet as mn
from specfuse import numgrad as ng
from specfuse.errors import DimensionError, ParseError
from specfuse.numgrad import Tensor, backward


def zeroed_model(**kw):
    model = mn.Model(msi_bands=3, hsi_bands=31, sticks=15, seed=0, **kw)
    for t in model.params.values():
        t.data[:] = 0.0
    return model


class TestKumaraswamy:
    def test_unit_concentration_is_identity(self):
        u = Tensor([[0.1, 0.3, 0.5, 0.9]])
        v = mn.kumaraswamy_sample(u, Tensor([[1.0]]), "standard")
        np.testing.assert_allclose(v.data, u.data, atol=1e-14)

    def test_standard_worked_example(self):
        # 1 - (1 - 0.75)^(1/2) = 0.5
        v = mn.kumaraswamy_sample(Tensor([[0.75]]), Tensor([[2.0]]), "standard")
        assert v.item() == pytest.approx(0.5, abs=1e-14)

    def test_as_printed_worked_example(self):
        # 0.75^(1/2)
        v = mn.kumaraswamy_sample(Tensor([[0.75]]), Tensor([[2.0]]), "as-printed")
        assert v.item() == pytest.approx(math.sqrt(0.75), abs=1e-14)

    @pytest.mark.parametrize("mode", mn.KUMARASWAMY_MODES)
    def test_output_stays_in_safe_interval(self, mode):
        u = Tensor([[0.0, 1e-12, 0.5, 1.0 - 1e-12, 1.0]])
        beta = Tensor([[1e-9]])
        v = mn.kumaraswamy_sample(u, beta, mode).data
        assert np.all(v >= mn.U_CLAMP)
        assert np.all(v <= 1.0 - mn.U_CLAMP)

    @pytest.mark.parametrize("mode", mn.KUMARASWAMY_MODES)
    def test_gradients_vs_finite_differences(self, mode):
        rng = np.random.default_rng(0)
        u0 = rng.uniform(0.2, 0.8, (2, 4))
        b0 = rng.uniform(0.5, 2.0, (2, 1))
        u = Tensor(u0.copy(), requires_grad=True)
        b = Tensor(b0.copy(), requires_grad=True)
        backward(ng.sum_all(mn.kumaraswamy_sample(u, b, mode)))

        step = 1e-6
        for t, arr in ((u, u0), (b, b0)):
            flat = arr.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = mn.kumaraswamy_sample(Tensor(u0), Tensor(b0), mode).data.sum()
                flat[i] = orig - step
                fm = mn.kumaraswamy_sample(Tensor(u0), Tensor(b0), mode).data.sum()
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                assert t.grad.reshape(-1)[i] == pytest.approx(num, rel=1e-5, abs=1e-9)

    def test_unknown_mode(self):
        with pytest.raises(DimensionError):
            mn.kumaraswamy_sample(Tensor([[0.5]]), Tensor([[1.0]]), "bogus")


class TestStickBreak:
    def test_paper_worked_example(self):
        s = mn.stick_break(np.array([[0.5, 0.5, 0.5]]), "paper")
        np.testing.assert_allclose(s.data, [[0.5, 0.25, 0.125]], atol=1e-15)

    def test_remainder_worked_example(self):
        s = mn.stick_break(np.array([[0.5, 0.5, 0.5]]), "remainder")
        np.testing.assert_allclose(s.data, [[0.5, 0.25, 0.25]], atol=1e-15)

    def test_paper_invariants_many_draws(self):
        rng = np.random.default_rng(1)
        v = rng.uniform(1e-6, 1 - 1e-6, (2000, 8))
        s = mn.stick_break(v, "paper").data
        assert np.all(s >= 0)
        assert np.all(s.sum(axis=1) <= 1 + 1e-12)

    def test_remainder_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        v = rng.uniform(1e-6, 1 - 1e-6, (2000, 8))
        s = mn.stick_break(v, "remainder").data
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)

    def test_first_stick_is_v1(self):
        rng = np.random.default_rng(3)
        v = rng.uniform(0.1, 0.9, (50, 5))
        for mode in mn.STICK_MODES:
            np.testing.assert_array_equal(mn.stick_break(v, mode).data[:, 0], v[:, 0])

    @pytest.mark.parametrize("mode", mn.STICK_MODES)
    def test_gradients_vs_finite_differences(self, mode):
        rng = np.random.default_rng(4)
        v0 = rng.uniform(0.2, 0.8, (3, 6))
        w = rng.standard_normal((3, 6))  # random linear functional
        v = Tensor(v0.copy(), requires_grad=True)
        backward(ng.sum_all(mn.stick_break(v, mode) * Tensor(w)))
        step = 1e-6
        flat = v0.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = (mn.stick_break(v0, mode).data * w).sum()
            flat[i] = orig - step
            fm = (mn.stick_break(v0, mode).data * w).sum()
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            assert v.grad.reshape(-1)[i] == pytest.approx(num, rel=1e-5, abs=1e-9)

    def test_unknown_mode(self):
        with pytest.raises(DimensionError):
            mn.stick_break(np.ones((1, 3)) * 0.5, "bogus")


class TestModel:
    def test_architecture_shapes(self):
        m = mn.Model(msi_bands=3, hsi_bands=31, sticks=15, seed=0)
        p = {k: t.data.shape for k, t in m.params.items()}
        # densely connected trunk: fan-in grows by the width each layer
        assert p["enc.u0.W"] == (3, 3)
        assert p["enc.u3.W"] == (12, 3)
        assert p["enc.uhead.W"] == (15, 15)
        assert p["enc.b1.W"] == (6, 3)
        assert p["enc.bhead.W"] == (9, 1)
        assert p["dec.W1"] == (15, 15)
        assert p["dec.W2"] == (15, 31)
        assert p["mi.Wh"] == (18, 18)
        assert p["mi.Wo"] == (18, 1)

    def test_name_partitions(self):
        m = mn.Model(3, 31)
        names = set(m.params)
        enc, dec, mi = set(m.encoder_names()), set(m.decoder_names()), set(m.critic_names())
        assert enc | dec | mi == names
        assert not (enc & dec) and not (enc & mi) and not (dec & mi)

    def test_deterministic_init(self):
        a = mn.Model(3, 31, seed=42)
        b = mn.Model(3, 31, seed=42)
        for k in a.params:
            assert np.array_equal(a.params[k].data, b.params[k].data)

    def test_snapshot_restore(self):
        m = mn.Model(3, 31, seed=0)
        snap = m.snapshot()
        m.params["dec.W1"].data += 1.0
        m.restore(snap)
        assert np.array_equal(m.params["dec.W1"].data, snap["dec.W1"])

    def test_invalid_modes(self):
        with pytest.raises(DimensionError):
            mn.Model(3, 31, stick_mode="bogus")
        with pytest.raises(DimensionError):
            mn.Model(3, 31, kumaraswamy_mode="bogus")


class TestEncodeDecode:
    def test_encode_at_zero_weights(self):
        # sigmoid(0)=1/2, softplus(0)=ln 2, so v = 1 - (1/2)^(1/ln 2) = 1 - 1/e
        model = zeroed_model()
        s, u, beta, v = mn.encode(np.zeros((2, 3)), model, return_parts=True)
        np.testing.assert_allclose(u.data, 0.5, atol=1e-15)
        np.testing.assert_allclose(beta.data, math.log(2), atol=1e-15)
        np.testing.assert_allclose(v.data, 1.0 - math.exp(-1.0), atol=1e-14)

    def test_encode_rejects_wrong_band_count(self):
        model = mn.Model(3, 31)
        with pytest.raises(DimensionError):
            mn.encode(np.zeros((2, 5)), model)

    def test_decode_is_linear(self):
        model = mn.Model(3, 31, seed=1)
        rng = np.random.default_rng(5)
        a = rng.standard_normal((4, 15))
        b = rng.standard_normal((4, 15))
        out = mn.decode(3.0 * a + b, model).data
        np.testing.assert_allclose(
            out, 3.0 * mn.decode(a, model).data + mn.decode(b, model).data, atol=1e-12
        )

    def test_decode_matches_extract_basis(self):
        model = mn.Model(3, 31, seed=2)
        rng = np.random.default_rng(6)
        s = rng.uniform(0, 1, (5, 15))
        np.testing.assert_allclose(
            mn.decode(s, model).data, s @ mn.extract_basis(model), atol=1e-12
        )

    def test_fuse_equals_decode_of_encode(self):
        model = mn.Model(3, 31, seed=3)
        rng = np.random.default_rng(7)
        y = rng.standard_normal((6, 3))
        np.testing.assert_array_equal(
            mn.fuse(y, model), mn.decode(mn.encode(y, model), model).data
        )

    def test_representation_rows_in_simplex(self):
        model = mn.Model(3, 31, seed=4, stick_mode="remainder")
        rng = np.random.default_rng(8)
        s = mn.encode(rng.standard_normal((100, 3)), model).data
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


class TestMsiTail:
    def test_matches_apply_srf(self):
        srf = hc.make_gaussian_srf(31, 3)
        rng = np.random.default_rng(9)
        x = rng.standard_normal((10, 31))
        m = hc.PixelMatrix(x, 5, 2)
        np.testing.assert_allclose(
            mn.msi_tail(x, srf).data, hc.apply_srf(m, srf).values, atol=1e-14
        )

    def test_response_gets_no_gradient(self):
        srf = hc.make_gaussian_srf(31, 3)
        x = Tensor(np.random.default_rng(10).standard_normal((4, 31)),
                   requires_grad=True)
        out = mn.msi_tail(x, srf)
        backward(ng.sum_all(out))
        assert x.grad is not None  # input does

    def test_band_mismatch(self):
        srf = hc.make_gaussian_srf(31, 3)
        with pytest.raises(DimensionError):
            mn.msi_tail(np.zeros((2, 30)), srf)


class TestMiScore:
    def test_value_at_zero_weights(self):
        # critic output is sigmoid(0) = 1/2, score is -softplus(-1/2)
        model = zeroed_model()
        rng = np.random.default_rng(11)
        score = mn.mi_score(rng.standard_normal((4, 3)),
                            rng.uniform(0, 1, (4, 15)), model)
        expected = -math.log(1.0 + math.exp(-0.5))
        np.testing.assert_allclose(score.data, expected, atol=1e-12)

    def test_score_is_negative_and_bounded(self):
        # t in (0,1) implies score in (-softplus(0), -softplus(-1))
        model = mn.Model(3, 31, seed=5)
        rng = np.random.default_rng(12)
        score = mn.mi_score(rng.standard_normal((50, 3)),
                            rng.uniform(0, 1, (50, 15)), model).data
        assert np.all(score > -math.log(2.0))
        assert np.all(score < -math.log(1.0 + math.exp(-1.0)))

    def test_pixel_count_mismatch(self):
        model = mn.Model(3, 31)
        with pytest.raises(DimensionError):
            mn.mi_score(np.zeros((3, 3)), np.zeros((4, 15)), model)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        for seed in range(5):
            model = mn.Model(3, 31, seed=seed)
            model.hsi_mean = np.random.default_rng(seed).standard_normal(31)
            model.msi_mean = np.random.default_rng(seed + 50).standard_normal(3)
            path = tmp_path / f"m{seed}.mdnw"
            mn.save_checkpoint(model, path)
            other = mn.Model(3, 31, seed=seed + 100)
            mn.load_checkpoint(other, path)
            for k in model.params:
                assert np.array_equal(other.params[k].data, model.params[k].data), k
            assert np.array_equal(other.hsi_mean, model.hsi_mean)
            assert np.array_equal(other.msi_mean, model.msi_mean)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mdnw"
        path.write_bytes(b"JUNK" + b"\x00" * 10)
        with pytest.raises(ParseError, match="offset 0"):
            mn.load_checkpoint_tensors(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "trunc.mdnw"
        mn.save_checkpoint(mn.Model(3, 31), path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(ParseError, match="truncated"):
            mn.load_checkpoint_tensors(path)

    def test_missing_tensor(self, tmp_path):
        path = tmp_path / "small.mdnw"
        small = mn.Model(3, 31, u_layers=2)
        mn.save_checkpoint(small, path)
        with pytest.raises(ParseError, match="missing tensor"):
            mn.load_checkpoint(mn.Model(3, 31), path)

    def test_shape_mismatch(self, tmp_path):
        path = tmp_path / "wide.mdnw"
        mn.save_checkpoint(mn.Model(4, 31), path)
        with pytest.raises(DimensionError, match="shape"):
            mn.load_checkpoint(mn.Model(3, 31), path)


def test_no_dead_parameters():
    # every parameter must receive a gradient from the full objective
    from specfuse.trainer import build_gradcheck_problem

    fn, params = build_gradcheck_problem(seed=0)
    for p in params.values():
        p.zero_grad()
    backward(fn(params))
    for name, p in params.items():
        assert p.grad is not None, f"{name} received no gradient"
        assert np.any(p.grad != 0), f"{name} gradient is all zeros"
