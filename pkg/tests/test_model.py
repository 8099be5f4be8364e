import copy

import pytest
import torch

from stale_lab import dtype_scope
from stale_lab.config import ModelConfig
from stale_lab.encoder import TemporalEncoder, TextEncoder
from stale_lab.model import STALE, CrossModalAdapter, DynamicMaskHead, MaskDecoder, binarize, classify, gate_foreground

D = torch.float64
TINY = ModelConfig(in_dim=6, dim=8, text_dim=8, T=8, enc_layers=1, heads=2, n_ctx=2, text_layers=1, text_heads=2,
                   n_queries=4, dec_layers=1, mask_dim=3, mask_hidden=3, consist_dim=5, topk=3)


def seeded(cls, cfg, *args):
    torch.manual_seed(0)
    with dtype_scope(D):
        return cls(cfg, *args)


class TestTemporalEncoder:
    def test_shape(self):
        enc = seeded(TemporalEncoder, TINY)
        assert enc(torch.randn(3, 6, 11, dtype=D)).shape == (3, 8, 11)

    def test_permutation_equivariant(self):
        enc = seeded(TemporalEncoder, TINY)
        E = torch.randn(1, 6, 10, dtype=D)
        perm = torch.randperm(10)
        torch.testing.assert_close(enc(E[:, :, perm]), enc(E)[:, :, perm], atol=1e-5, rtol=0)

    def test_positional_flag_breaks_equivariance(self):
        enc = seeded(TemporalEncoder, ModelConfig(**{**TINY.__dict__, "pos_encoding": True}))
        E = torch.randn(1, 6, 10, dtype=D)
        perm = torch.arange(9, -1, -1)
        assert not torch.allclose(enc(E[:, :, perm]), enc(E)[:, :, perm], atol=1e-5)

    def test_zero_layers_is_projection(self):
        enc = seeded(TemporalEncoder, ModelConfig(**{**TINY.__dict__, "enc_layers": 0}))
        E = torch.randn(2, 6, 5, dtype=D)
        torch.testing.assert_close(enc(E), enc.proj(E.transpose(1, 2)).transpose(1, 2))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            seeded(TemporalEncoder, TINY)(torch.randn(1, 5, 4, dtype=D))


class TestTextEncoder:
    def test_shape_and_duplicates(self):
        text = seeded(TextEncoder, TINY)
        tok = torch.randn(4, 8, dtype=D)
        tok[2] = tok[0]
        out = text(tok)
        assert out.shape == (5, 8)
        torch.testing.assert_close(out[0], out[2], rtol=0, atol=0)

    def test_identity_encoder(self):
        cfg = ModelConfig(**{**TINY.__dict__, "n_ctx": 0, "text_layers": 0})
        text = seeded(TextEncoder, cfg)
        tok = torch.randn(3, 8, dtype=D)
        out = text(tok)
        torch.testing.assert_close(out[:3], tok, rtol=0, atol=0)
        torch.testing.assert_close(out[3], text.background, rtol=0, atol=0)

    def test_additive_mode(self):
        text = seeded(TextEncoder, ModelConfig(**{**TINY.__dict__, "text_mode": "additive"}))
        tok = torch.randn(3, 8, dtype=D)
        torch.testing.assert_close(text(tok)[:3], tok + text.ctx.mean(0))

    def test_context_too_long(self):
        text = seeded(TextEncoder, ModelConfig(**{**TINY.__dict__, "n_ctx": 80}))
        with pytest.raises(ValueError):
            text(torch.randn(2, 8, dtype=D))

    def test_frozen_encoder_step(self):
        cfg = ModelConfig(**{**TINY.__dict__, "text_trainable": False})
        text = seeded(TextEncoder, cfg)
        before = copy.deepcopy(text.layers.state_dict())
        ctx0, bg0 = text.ctx.detach().clone(), text.background.detach().clone()
        opt = torch.optim.Adam([p for p in text.parameters() if p.requires_grad], lr=1e-2)
        text(torch.randn(3, 8, dtype=D)).pow(2).sum().backward()
        opt.step()
        for k, v in text.layers.state_dict().items():
            assert torch.equal(v, before[k]), k
        assert not torch.equal(text.ctx, ctx0) and not torch.equal(text.background, bg0)


class TestMaskDecoder:
    def test_shapes_default_queries(self):
        cfg = ModelConfig(T=100)
        dec = seeded(MaskDecoder, cfg)
        L_q, L_hat = dec(torch.randn(2, 64, 100, dtype=D))
        assert L_q.shape == (2, 20, 100) and L_hat.shape == (2, 100)
        assert ((L_hat > 0) & (L_hat < 1)).all() and ((L_q > 0) & (L_q < 1)).all()

    def test_zero_projection(self):
        dec = seeded(MaskDecoder, TINY)
        with torch.no_grad():
            for p in (dec.mask_proj.weight, dec.mask_proj.bias, dec.weigh.weight, dec.weigh.bias):
                p.zero_()
        L_q, L_hat = dec(torch.randn(1, 8, 8, dtype=D))
        assert torch.all(L_q == 0.5) and torch.all(L_hat == 0.5)

    def test_zero_queries_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(n_queries=0)


class TestGate:
    def test_all_foreground(self):
        F_vis = torch.randn(1, 4, 3, dtype=D)
        L_bin, F_fg = gate_foreground(F_vis, torch.tensor([[0.6, 0.5, 0.99]], dtype=D), 0.5)
        assert torch.equal(F_fg, F_vis) and torch.equal(L_bin, torch.ones(1, 3, dtype=D))

    def test_all_background(self):
        _, F_fg = gate_foreground(torch.randn(1, 4, 3, dtype=D), torch.full((1, 3), 0.2, dtype=D), 0.5)
        assert torch.equal(F_fg, torch.zeros(1, 4, 3, dtype=D))

    def test_mixed(self):
        F_vis = torch.randn(4, 2, dtype=D)
        L_bin, F_fg = gate_foreground(F_vis, torch.tensor([0.9, 0.1], dtype=D), 0.5)
        assert torch.equal(L_bin, torch.tensor([1.0, 0.0], dtype=D))
        assert torch.equal(F_fg[:, 0], F_vis[:, 0]) and torch.equal(F_fg[:, 1], torch.zeros(4, dtype=D))

    def test_straight_through_gradient(self):
        L_hat = torch.tensor([0.2, 0.7], dtype=D, requires_grad=True)
        (binarize(L_hat, 0.5) * torch.tensor([3.0, -2.0], dtype=D)).sum().backward()
        torch.testing.assert_close(L_hat.grad, torch.tensor([3.0, -2.0], dtype=D))

    def test_hard_gradient_is_zero(self):
        L_hat = torch.tensor([0.2, 0.7], dtype=D, requires_grad=True)
        out = binarize(L_hat, 0.5, straight_through=False)
        assert not out.requires_grad and torch.equal(out, torch.tensor([0.0, 1.0], dtype=D))

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            gate_foreground(torch.zeros(2, 2), torch.zeros(2), 1.0)


class TestCrossAdapt:
    def test_alpha_zero_identity(self):
        ad = seeded(CrossModalAdapter, TINY, torch.nn.Identity())
        with torch.no_grad():
            ad.alpha.zero_()
        F_lan = torch.randn(4, 8, dtype=D)
        out = ad(F_lan, torch.randn(2, 8, 9, dtype=D))
        assert out.shape == (2, 4, 8)
        assert torch.equal(out[0], F_lan) and torch.equal(out[1], F_lan)

    def test_residual_bound_at_init(self):
        ad = seeded(CrossModalAdapter, TINY, torch.nn.Identity())
        F_lan, F_fg = torch.randn(5, 8, dtype=D), torch.randn(1, 8, 7, dtype=D)
        assert torch.all(ad.alpha == 1e-3)
        E_c = ad.layer(F_lan[None], F_fg.transpose(1, 2))
        diff = (ad(F_lan, F_fg)[0] - F_lan).abs().max()
        # the subtraction itself may round by one ulp of |F_lan|
        assert diff <= 1e-3 * E_c.abs().max() + 4 * torch.finfo(D).eps * F_lan.abs().max()

    def test_width_mismatch(self):
        ad = seeded(CrossModalAdapter, TINY, torch.nn.Identity())
        with pytest.raises(ValueError):
            ad(torch.randn(3, 5, dtype=D), torch.randn(1, 8, 4, dtype=D))


class TestClassify:
    def test_parallel_row_wins(self):
        F_lan = torch.eye(4, dtype=D)
        F_fg = torch.tensor([[0.0], [2.5], [0.0], [0.0]], dtype=D)
        P = classify(F_lan, F_fg, 1 / 0.07)
        assert P[:, 0].argmax() == 1

    def test_zero_column_uniform(self):
        P = classify(torch.randn(5, 6, dtype=D), torch.zeros(6, 3, dtype=D), 1 / 0.07)
        torch.testing.assert_close(P, torch.full((5, 3), 0.2, dtype=D), rtol=0, atol=1e-15)

    def test_columns_sum_to_one(self):
        P = classify(torch.randn(7, 6, dtype=D), torch.randn(6, 20, dtype=D), 14.0)
        torch.testing.assert_close(P.sum(0), torch.ones(20, dtype=D), rtol=0, atol=1e-6)

    def test_gate_equals_gated_features(self):
        F_lan, F_vis = torch.randn(1, 4, 6, dtype=D), torch.randn(1, 6, 5, dtype=D)
        gate = torch.tensor([[1.0, 0.0, 1.0, 0.0, 0.0]], dtype=D)
        a = classify(F_lan, F_vis * gate[:, None], 10.0)
        b = classify(F_lan, F_vis, 10.0, gate=gate)
        torch.testing.assert_close(a, b, rtol=0, atol=1e-15)


class TestLocalizer:
    def test_range_and_shape(self):
        M = seeded(DynamicMaskHead, TINY)(torch.randn(2, 8, 8, dtype=D))
        assert M.shape == (2, 8, 8) and ((M > 0) & (M < 1)).all()

    def test_constant_input_identical_columns(self):
        cfg = ModelConfig(**{**TINY.__dict__, "rel_coords": False})
        head = seeded(DynamicMaskHead, cfg)
        M = head(torch.randn(1, 8, 1, dtype=D).expand(1, 8, 8))
        for t in range(1, 8):
            torch.testing.assert_close(M[0, :, t], M[0, :, 0], rtol=0, atol=0)

    def test_constant_input_with_coordinates_shifts(self):
        head = seeded(DynamicMaskHead, TINY)
        M = head(torch.randn(1, 8, 1, dtype=D).expand(1, 8, 8))[0]
        # away from the zero-padded borders, column t+1 is column t shifted down by one
        torch.testing.assert_close(M[3, 2], M[4, 3], rtol=0, atol=1e-12)

    def test_zero_final_layer(self):
        head = seeded(DynamicMaskHead, TINY)
        with torch.no_grad():
            head.controller.weight[head.final_slice()] = 0
            head.controller.bias[head.final_slice()] = 0
        M = head(torch.randn(1, 8, 8, dtype=D))
        assert torch.all(M == 0.5)


class TestForward:
    def make(self, cfg=TINY):
        return seeded(STALE, cfg)

    def test_shapes(self):
        cfg = ModelConfig(T=100, n_ctx=4)
        model = seeded(STALE, cfg)
        out = model(torch.randn(64, 100, dtype=D), torch.randn(5, 64, dtype=D))
        assert out.P.shape == (1, 6, 100) and out.M.shape == (1, 100, 100) and out.L_hat.shape == (1, 100)

    def test_ranges(self):
        out = self.make()(torch.randn(3, 6, 8, dtype=D), torch.randn(3, 8, dtype=D))
        torch.testing.assert_close(out.P.sum(1), torch.ones(3, 8, dtype=D))
        assert (out.P >= 0).all() and (out.P <= 1).all()
        for x in (out.M, out.L_q, out.L_hat):
            assert ((x > 0) & (x < 1)).all()
        assert set(out.L_bin.unique().tolist()) <= {0.0, 1.0}

    def test_branch_independence(self):
        model = self.make()
        E, tok = torch.randn(2, 6, 8, dtype=D), torch.randn(3, 8, dtype=D)
        ref = model(E, tok)
        with torch.no_grad():
            for p in list(model.cross.parameters()) + list(model.text.parameters()) + [model.logit_scale]:
                p.add_(torch.randn_like(p))
        out = model(E, tok)
        assert torch.equal(out.M, ref.M) and not torch.equal(out.P, ref.P)
        with torch.no_grad():
            for p in model.localizer.parameters():
                p.add_(torch.randn_like(p))
        out2 = model(E, tok)
        assert torch.equal(out2.P, out.P) and not torch.equal(out2.M, out.M)

    def test_mask_decoder_class_agnostic(self):
        model = self.make()
        E = torch.randn(2, 6, 8, dtype=D)
        a = model(E, torch.randn(3, 8, dtype=D))
        b = model(E, torch.randn(7, 8, dtype=D))
        assert torch.equal(a.L_q, b.L_q) and torch.equal(a.L_hat, b.L_hat)

    def test_no_masking_ablation(self):
        cfg = ModelConfig(**{**TINY.__dict__, "use_masking": False})
        out = self.make(cfg)(torch.randn(1, 6, 8, dtype=D), torch.randn(3, 8, dtype=D))
        assert torch.equal(out.F_fg, out.F_vis)
