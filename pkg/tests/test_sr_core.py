import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rangesr.errors import InvalidConfig, InvalidPenalty, ShapeMismatch
from rangesr.rangeview import DownsampleSpec
from rangesr.sr_core import (
    MSCA,
    Denoiser,
    GuidanceMask,
    SRNet,
    UnrollConfig,
    apply_mask,
    count_parameters,
    data_consistency,
    nearest_row_upsample,
    sr_forward,
)


def dense_dc(S, Z, Y, D, b):
    """Solve (D^T D + 2b I) T = D^T S + b (Z + Y) column by column."""
    H = D.shape[1]
    A = D.T @ D + 2 * b * np.eye(H)
    return np.linalg.solve(A, D.T @ S + b * (Z + Y))


def objective(T, S, Z, Y, D, b):
    return 0.5 * np.sum((S - D @ T) ** 2) + b / 2 * np.sum((Z - T) ** 2) + b / 2 * np.sum((Y - T) ** 2)


def random_spec(rng, h):
    lo = int(rng.integers(1, h + 1))
    return DownsampleSpec(tuple(sorted(rng.choice(h, size=lo, replace=False))), h)


def t64(a):
    return torch.as_tensor(a, dtype=torch.float64)


class TestDataConsistency:
    def test_two_row_example(self):
        # dense solve of [[2, 0], [0, 1]] T = [4 + 0.5 * 4, 0.5 * 12] gives T = [3, 6]
        spec = DownsampleSpec((0,), 2)
        S = t64([[4.0]])
        Z = t64([[2.0], [6.0]])
        T = data_consistency(S, Z, Z.clone(), spec, 0.5)
        expected = dense_dc(np.array([[4.0]]), np.array([[2.0], [6.0]]),
                            np.array([[2.0], [6.0]]), spec.matrix(), 0.5)
        np.testing.assert_allclose(expected, [[3.0], [6.0]])
        np.testing.assert_allclose(T.numpy(), expected, atol=1e-12)

    @pytest.mark.parametrize("b", [1e-3, 0.1, 1.0, 10.0])
    def test_exact_data_fixed_point(self, b):
        rng = np.random.default_rng(0)
        spec = DownsampleSpec.uniform(8, 2)
        Tstar = rng.uniform(0, 80, (8, 4))
        S = spec.matrix() @ Tstar
        T = data_consistency(t64(S), t64(Tstar), t64(Tstar), spec, b)
        np.testing.assert_allclose(T.numpy(), Tstar, atol=1e-10)

    def test_matches_dense_solver_100_instances(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            h, w = int(rng.integers(1, 17)), int(rng.integers(1, 9))
            spec = random_spec(rng, h)
            b = float(10 ** rng.uniform(-3, 1))
            S = rng.normal(size=(spec.lo_height, w)) * 10
            Z = rng.normal(size=(h, w)) * 10
            Y = rng.normal(size=(h, w)) * 10
            T = data_consistency(t64(S), t64(Z), t64(Y), spec, b).numpy()
            np.testing.assert_allclose(T, dense_dc(S, Z, Y, spec.matrix(), b), atol=1e-6, rtol=0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31))
    def test_minimizer(self, seed):
        rng = np.random.default_rng(seed)
        h, w = int(rng.integers(2, 17)), int(rng.integers(1, 9))
        spec = random_spec(rng, h)
        b = float(10 ** rng.uniform(-3, 1))
        S, Z, Y = rng.normal(size=(spec.lo_height, w)), rng.normal(size=(h, w)), rng.normal(size=(h, w))
        T = data_consistency(t64(S), t64(Z), t64(Y), spec, b).numpy()
        D = spec.matrix()
        base = objective(T, S, Z, Y, D, b)
        for _ in range(20):
            eps = rng.normal(size=T.shape)
            eps *= 1e-3 / np.linalg.norm(eps)
            assert objective(T + eps, S, Z, Y, D, b) >= base

    def test_unselected_rows_ignore_S(self):
        rng = np.random.default_rng(3)
        spec = DownsampleSpec.uniform(16, 4)
        S = torch.rand(2, 2, 4, 8)
        Z, Y = torch.rand(2, 2, 16, 8), torch.rand(2, 2, 16, 8)
        T1 = data_consistency(S, Z, Y, spec, 0.3)
        T2 = data_consistency(S + torch.as_tensor(rng.normal(size=S.shape), dtype=torch.float32) * 50,
                              Z, Y, spec, 0.3)
        other = [r for r in range(16) if r not in spec.selected_rows]
        assert torch.equal(T1[..., other, :], T2[..., other, :])
        assert not torch.equal(T1[..., list(spec.selected_rows), :], T2[..., list(spec.selected_rows), :])

    def test_small_penalty_limit(self):
        # selected rows deviate from S by exactly b (Z + Y - 2S) / (1 + 2b)
        gen = torch.Generator().manual_seed(0)
        spec = DownsampleSpec.uniform(16, 4)
        S = torch.rand(3, 4, 8, generator=gen, dtype=torch.float64) * 80
        Z = torch.rand(3, 16, 8, generator=gen, dtype=torch.float64) * 80
        Y = torch.rand(3, 16, 8, generator=gen, dtype=torch.float64) * 80
        sel = list(spec.selected_rows)
        prev = None
        for b in (1e-2, 1e-4, 1e-6):
            dev = (data_consistency(S, Z, Y, spec, b)[..., sel, :] - S).abs()
            bound = b * (Z[..., sel, :] + Y[..., sel, :] - 2 * S).abs() / (1 + 2 * b)
            torch.testing.assert_close(dev, bound, rtol=1e-9, atol=1e-12)
            assert dev.max() <= b * 160
            if prev is not None:
                assert dev.max() < prev
            prev = dev.max()

    def test_missing_measurements_match_dense(self):
        rng = np.random.default_rng(5)
        spec = DownsampleSpec.uniform(8, 4)
        S, Z, Y = rng.normal(size=(4, 3)), rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
        lo_valid = rng.random((4, 3)) > 0.4
        T = data_consistency(t64(S), t64(Z), t64(Y), spec, 0.7, torch.as_tensor(lo_valid)).numpy()
        D = spec.matrix()
        for j in range(3):
            Dj = D[lo_valid[:, j]]
            ref = dense_dc(S[lo_valid[:, j], j:j + 1], Z[:, j:j + 1], Y[:, j:j + 1], Dj, 0.7)
            np.testing.assert_allclose(T[:, j:j + 1], ref, atol=1e-10)

    def test_errors(self):
        spec = DownsampleSpec.uniform(8, 2)
        S, Z = torch.rand(2, 4), torch.rand(8, 4)
        with pytest.raises(InvalidPenalty):
            data_consistency(S, Z, Z, spec, 0.0)
        with pytest.raises(InvalidPenalty):
            data_consistency(S, Z, Z, spec, torch.tensor(-1.0))
        with pytest.raises(ShapeMismatch):
            data_consistency(torch.rand(3, 4), Z, Z, spec, 0.1)
        with pytest.raises(ShapeMismatch):
            data_consistency(S, Z, torch.rand(8, 5), spec, 0.1)


class TestDenoiser:
    def test_kitti_shape(self):
        den = Denoiser(2, 18)
        with torch.no_grad():
            out = den(torch.rand(1, 2, 64, 1024) * 50)
        assert out.shape == (1, 2, 64, 1024)

    def test_zero_weights_zero_output(self):
        den = Denoiser(2, 8)
        with torch.no_grad():
            for p in den.parameters():
                p.zero_()
        out = den(torch.rand(2, 2, 16, 32) * 50)
        assert torch.count_nonzero(out) == 0

    def test_finite_difference_gradient(self):
        torch.manual_seed(0)
        den = Denoiser(2, 6).double()
        x = torch.rand(1, 2, 8, 16, dtype=torch.float64) * 20
        params = dict(den.named_parameters())
        for name, idx in [("enc1.conv.0.weight", (3, 1, 1, 2)), ("fuse.weight", (2, 5, 0, 1)),
                          ("enc2.attn.mix.weight", (4, 7, 0, 0)), ("out.bias", (1,))]:
            p = params[name]
            den.zero_grad()
            den(x).sum().backward()
            analytic = p.grad[idx].item()
            h = 1e-4
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + h
                fp = den(x).sum().item()
                p[idx] = orig - h
                fm = den(x).sum().item()
                p[idx] = orig
            numeric = (fp - fm) / (2 * h)
            assert analytic == pytest.approx(numeric, rel=1e-3, abs=1e-6), name


class TestGuidanceMask:
    def test_kitti_shape_and_nonnegative(self):
        head = GuidanceMask(2, 8)
        with torch.no_grad():
            m = head(torch.randn(1, 2, 64, 1024) * 30)
        assert m.shape == (1, 1, 64, 1024)
        assert (m >= 0).all()

    def test_fits_importance_map(self, desk_data):
        # target: w_c on labeled pixels, 0 elsewhere; input: hi-res range + remission
        from rangesr.losses import class_weights

        cw = class_weights(desk_data.labels.numpy(), 5)
        w = cw.tensor()
        Z = desk_data.target
        target = w[desk_data.labels]
        torch.manual_seed(0)
        head = GuidanceMask(2, 8, scale=[20.0, 1.0])
        steps = 1000
        opt = torch.optim.Adam(head.parameters(), lr=3e-2)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
        for _ in range(steps):
            opt.zero_grad()
            (head(Z).squeeze(1) - target).abs().mean().backward()
            opt.step()
            sched.step()
        with torch.no_grad():
            mae = (head(Z).squeeze(1) - target).abs().mean().item()
        assert mae < 0.05


class TestApplyMask:
    def test_identity_and_zero(self):
        Z = torch.randn(2, 3, 4, 5)
        assert torch.equal(apply_mask(torch.ones(2, 1, 4, 5), Z), Z)
        assert torch.count_nonzero(apply_mask(torch.zeros(2, 1, 4, 5), Z)) == 0

    def test_scalar_definition(self):
        Z = torch.zeros(1, 1, 2, 2)
        Z[0, 0, 1, 0] = 3.5
        m = torch.ones(1, 1, 2, 2)
        m[0, 0, 1, 0] = 2.0
        assert apply_mask(m, Z)[0, 0, 1, 0].item() == 7.0

    def test_plane_broadcast_and_mismatch(self):
        Z = torch.randn(2, 4, 5)
        np.testing.assert_allclose(apply_mask(torch.full((4, 5), 2.0), Z), 2 * Z)
        with pytest.raises(ShapeMismatch):
            apply_mask(torch.ones(1, 1, 3, 5), torch.ones(1, 2, 4, 5))


class TestSRForward:
    def test_kitti_shapes(self):
        net = SRNet(DownsampleSpec.uniform(64, 16))
        with torch.no_grad():
            Y, states = sr_forward(torch.rand(1, 2, 16, 1024) * 50, net)
        assert Y.shape == (1, 2, 64, 1024)
        assert len(states) == 4
        for s in states:
            assert s.T.shape == s.Z.shape == s.Y.shape == Y.shape
            assert s.b.item() > 0

    def test_k1_structure(self):
        spec = DownsampleSpec.uniform(16, 4)
        torch.manual_seed(0)
        net = SRNet(spec, UnrollConfig(K=1, denoiser_width=4))
        S = torch.rand(2, 2, 4, 16) * 30
        Y, _ = sr_forward(S, net)
        layer = net.layers[0]
        Z0 = nearest_row_upsample(S, spec)
        T = data_consistency(S, Z0, Z0, spec, layer.penalty)
        Z = layer.denoiser(T)
        torch.testing.assert_close(Y, apply_mask(layer.mask(Z), Z), rtol=0, atol=0)

    def test_wrong_height(self):
        net = SRNet(DownsampleSpec.uniform(16, 4), UnrollConfig(K=1, denoiser_width=4))
        with pytest.raises(ShapeMismatch):
            net(torch.rand(1, 2, 5, 8))

    def test_gradient_coverage(self):
        torch.manual_seed(1)
        net = SRNet(DownsampleSpec.uniform(16, 4), UnrollConfig(denoiser_width=4))
        S = torch.rand(2, 2, 4, 32) * 30
        Y, states = sr_forward(S, net)
        (Y.square().mean() + sum(s.mask.mean() for s in states)).backward()
        for name, p in net.named_parameters():
            assert p.grad is not None and p.grad.abs().sum() > 0, name

    def test_penalty_stays_positive(self):
        net = SRNet(DownsampleSpec.uniform(8, 2), UnrollConfig(K=2, denoiser_width=4))
        opt = torch.optim.SGD([l.raw_penalty for l in net.layers], lr=100.0)
        for _ in range(20):
            opt.zero_grad()
            sum(l.penalty for l in net.layers).backward()
            opt.step()
        for l in net.layers:
            assert l.penalty.item() > 0


class TestParameters:
    def test_default_budget(self):
        n = count_parameters(SRNet(DownsampleSpec.uniform(64, 16)))
        assert 50_000 <= n <= 150_000

    def test_sharing_reduces(self):
        spec = DownsampleSpec.uniform(64, 16)
        assert count_parameters(SRNet(spec, UnrollConfig(share_weights_across_layers=True))) < \
            count_parameters(SRNet(spec))

    def test_width_monotone(self):
        spec = DownsampleSpec.uniform(64, 16)
        assert count_parameters(SRNet(spec, UnrollConfig(denoiser_width=36))) > \
            count_parameters(SRNet(spec))

    def test_penalties_counted(self):
        net = SRNet(DownsampleSpec.uniform(8, 2), UnrollConfig(K=3, denoiser_width=4))
        names = [n for n, _ in net.named_parameters() if n.endswith("raw_penalty")]
        assert names == ["layers.1.raw_penalty", "layers.2.raw_penalty"]
        assert [k for k in net.state_dict() if k.endswith("raw_penalty")] == \
            ["layers.0.raw_penalty", "layers.1.raw_penalty", "layers.2.raw_penalty"]

    def test_first_solve_independent_of_penalty(self):
        spec = DownsampleSpec.uniform(16, 4)
        S = torch.rand(2, 2, 4, 8, dtype=torch.float64) * 80
        lo_valid = torch.rand(2, 1, 4, 8) > 0.2
        Z0 = nearest_row_upsample(S, spec)
        ref = data_consistency(S, Z0, Z0, spec, torch.tensor(1e-3, dtype=torch.float64), lo_valid)
        for b in (0.1, 1.0, 10.0):
            T = data_consistency(S, Z0, Z0, spec, torch.tensor(b, dtype=torch.float64), lo_valid)
            torch.testing.assert_close(T, ref, rtol=0, atol=1e-12)

    def test_config_validation(self):
        with pytest.raises(InvalidConfig):
            UnrollConfig(K=0)
        with pytest.raises(InvalidConfig):
            UnrollConfig(penalty_init=0.0)


class TestMSCA:
    def test_shape(self):
        m = MSCA(32)
        x = torch.randn(1, 32, 16, 256)
        assert m(x).shape == x.shape

    def test_strip_footprint(self):
        m = MSCA(1, (7, 11, 21))
        kernels = [(b[0].kernel_size, b[1].kernel_size) for b in m.strips]
        assert kernels == [((1, 7), (7, 1)), ((1, 11), (11, 1)), ((1, 21), (21, 1))]
        with torch.no_grad():
            for p in m.parameters():
                p.fill_(1.0) if p.dim() > 1 else p.zero_()
            x = torch.zeros(1, 1, 64, 64)
            x[0, 0, 32, 32] = 1.0
            attn = m.local(x)
            for branch, k in zip(m.strips, (7, 11, 21)):
                resp = branch(attn)[0, 0]
                cols = torch.nonzero(resp.abs().sum(0)).flatten()
                rows = torch.nonzero(resp.abs().sum(1)).flatten()
                # 5x5 local footprint widened by k - 1 in both directions
                assert cols.max() - cols.min() + 1 == 5 + k - 1
                assert rows.max() - rows.min() + 1 == 5 + k - 1

    def test_zero_input(self):
        m = MSCA(8)
        out = m(torch.zeros(1, 8, 16, 16))
        assert torch.count_nonzero(out) == 0
