import math

import pytest
import torch
import torch.nn.functional as F

from semcom.diffusion import ScoreNet, ScoreNetConfig, denoiser_predict
from semcom.lora import (
    AdaptedConv2d,
    AdaptedLinear,
    AdapterCompatibilityError,
    AdapterError,
    AdapterFormatError,
    AdapterPair,
    AdapterSet,
    AdapterSpec,
    KroneckerConvAdapter,
    adapted_forward,
    attach,
    attach_attention_adapters,
    attach_scorenet_adapters,
    attached,
    detach_all,
    init_adapter,
    load_adapters,
    model_fingerprint,
    param_report_from_counts,
    save_adapters,
)
from semcom.swin import SwinBlock


def rng(seed=0):
    return torch.Generator().manual_seed(seed)


class TestInit:
    def test_b_zero_and_delta_zero(self):
        pair = init_adapter(AdapterSpec("encoder", 4), d=12, k=10, rng=rng())
        assert torch.equal(pair.b, torch.zeros(12, 4))
        x = torch.randn(3, 10)
        assert torch.equal(pair.delta(x), torch.zeros(3, 12))

    def test_encoder_kaiming_bound(self):
        pair = init_adapter(AdapterSpec("encoder", 16), d=64, k=64, rng=rng(1))
        bound = math.sqrt(6.0 / 16)
        assert float(pair.a.abs().max()) <= bound
        assert float(pair.a.abs().max()) > 0.5 * bound  # actually spread out
        assert bound == pytest.approx(0.6124, abs=1e-4)

    def test_decoder_normal_std(self):
        g = rng(2)
        samples = torch.cat(
            [init_adapter(AdapterSpec("decoder", 25), d=100, k=1000, rng=g).a.flatten() for _ in range(4)]
        )
        assert samples.numel() == 100_000
        assert float(samples.std()) == pytest.approx(0.02, rel=0.05)
        assert float(samples.mean()) == pytest.approx(0.0, abs=0.001)

    def test_classifier_xavier_bound(self):
        pair = init_adapter(AdapterSpec("classifier", 4), d=10, k=256, rng=rng(3))
        bound = math.sqrt(6.0 / (4 + 256))
        assert float(pair.a.abs().max()) <= bound

    def test_rank_zero_rejected(self):
        with pytest.raises(AdapterError):
            AdapterSpec("encoder", 0)

    def test_rank_too_large_rejected(self):
        with pytest.raises(AdapterError):
            init_adapter(AdapterSpec("encoder", 11), d=10, k=64, rng=rng())

    def test_full_rank_accepted_and_consistent(self):
        pair = init_adapter(AdapterSpec("encoder", 8), d=8, k=16, rng=rng(4))
        with torch.no_grad():
            pair.b.normal_(generator=rng(5))
        x = torch.randn(4, 16)
        low_rank = adapted_forward(torch.zeros(8, 16), pair, x)
        assert torch.allclose(low_rank, x @ pair.merged().T, rtol=1e-5, atol=1e-6)

    def test_scale_is_alpha_hat_over_rank(self):
        assert AdapterSpec("encoder", 16).scale == 1.0
        assert AdapterSpec("encoder", 16, alpha_hat=32).scale == 2.0
        doubled = AdapterSpec("encoder", 16).with_rank(32)
        assert doubled.rank == 32 and doubled.scale == 1.0


class TestAdaptedForward:
    def test_zero_b_gives_base_product(self):
        w = torch.randn(6, 5)
        pair = init_adapter(AdapterSpec("encoder", 2), d=6, k=5, rng=rng())
        x = torch.randn(7, 5)
        assert torch.equal(adapted_forward(w, pair, x), x @ w.T)

    def test_merge_consistency(self):
        w = torch.randn(32, 24)
        pair = init_adapter(AdapterSpec("decoder", 4), d=32, k=24, rng=rng(1))
        with torch.no_grad():
            pair.b.normal_(generator=rng(2))
        x = torch.randn(16, 24)
        low = adapted_forward(w, pair, x)
        dense = x @ (w + pair.merged()).T
        assert float((low - dense).abs().max() / dense.abs().max()) < 1e-5

    def test_extra_ops_formula(self):
        pair = init_adapter(AdapterSpec("encoder", 8), d=48, k=96, rng=rng())
        assert pair.extra_ops_per_vector == 8 * (48 + 96)
        assert pair.param_count == 8 * (48 + 96)

    def test_shape_mismatch_rejected(self):
        pair = init_adapter(AdapterSpec("encoder", 2), d=6, k=5, rng=rng())
        with pytest.raises(AdapterError):
            adapted_forward(torch.randn(6, 7), pair, torch.randn(3, 7))


class TestKroneckerConv:
    def make(self, c_out=8, c_in=6, k=3, rank=2, seed=0):
        adapter = KroneckerConvAdapter(c_out, c_in, k, AdapterSpec("denoiser", rank), rng(seed))
        return adapter

    def test_zero_init_transparent(self):
        conv = AdaptedConv2d(6, 8, 3, padding=1)
        x = torch.randn(2, 6, 5, 5)
        base = conv(x)
        conv.set_adapter(self.make())
        assert torch.equal(conv(x), base)

    def test_merge_consistency_with_dense_kernel(self):
        adapter = self.make(seed=1)
        with torch.no_grad():
            adapter.b_spatial.normal_(generator=rng(2))
        x = torch.randn(3, 6, 7, 7)
        low = adapter.delta(x)
        dense = F.conv2d(x, adapter.merged(), padding=1)
        assert float((low - dense).abs().max()) / float(dense.abs().max()) < 1e-5

    def test_kron_structure_of_merged_kernel(self):
        adapter = self.make(seed=3)
        with torch.no_grad():
            adapter.b_spatial.normal_(generator=rng(4))
        full = adapter.merged()
        channel = adapter.u @ adapter.v
        for o in (0, 3):
            for i in (0, 5):
                assert torch.allclose(full[o, i], adapter.scale * channel[o, i] * adapter.b_spatial, atol=1e-6)

    def test_param_count_formula(self):
        adapter = self.make(c_out=32, c_in=16, k=3, rank=8)
        assert adapter.param_count == 3 * 3 + 8 * (32 + 16)

    def test_rank_bound(self):
        with pytest.raises(AdapterError):
            KroneckerConvAdapter(4, 4, 3, AdapterSpec("denoiser", 5), rng())


class TestAttachDetach:
    def test_linear_attach_validates_shape(self):
        layer = AdaptedLinear(10, 6)
        with pytest.raises(AdapterError):
            layer.set_adapter(init_adapter(AdapterSpec("encoder", 2), d=6, k=11, rng=rng()))

    def test_attention_adapter_ranks(self):
        torch.manual_seed(0)
        block = SwinBlock(dim=32, heads=2, window=4, shift=0)
        created = attach_attention_adapters(block, AdapterSpec("encoder", 16), rng())
        assert created["attn.q"].rank == 32
        assert created["attn.k"].rank == 32
        assert created["attn.v"].rank == 32
        assert created["attn.out"].rank == 16
        # effective scaling preserved under the rank doubling
        assert created["attn.q"].scale == created["attn.out"].scale == 1.0

    def test_attention_adapters_transparent_and_bias_frozen(self):
        torch.manual_seed(1)
        block = SwinBlock(dim=16, heads=2, window=4, shift=2)
        x = torch.randn(1, 8, 8, 16)
        base = block(x)
        bias_before = block.attn.rel_bias.detach().clone()
        created = attach_attention_adapters(block, AdapterSpec("encoder", 4), rng(1))
        assert torch.equal(block(x), base)
        # train the adapters a little: the bias table must not move
        opt = torch.optim.SGD([p for a in created.values() for p in a.parameters()], lr=0.1)
        for _ in range(3):
            loss = block(x).square().mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert torch.equal(block.attn.rel_bias.detach(), bias_before)
        assert not torch.equal(block(x), base)  # adapters did move

    def test_attention_adapter_param_count(self):
        torch.manual_seed(2)
        d = 32
        block = SwinBlock(dim=d, heads=2, window=4, shift=0)
        created = attach_attention_adapters(block, AdapterSpec("encoder", 8), rng(2))
        total = sum(a.param_count for a in created.values())
        assert total == 3 * 16 * (d + d) + 8 * (d + d)

    def test_scorenet_adapters_transparent(self):
        torch.manual_seed(3)
        net = ScoreNet(ScoreNetConfig(channels=4, width=8, n_blocks=2, time_dim=16, gn_groups=4))
        with torch.no_grad():  # fresh nets have a zeroed output conv; make the blocks visible
            net.conv_out.weight.normal_(generator=rng(30))
        z = torch.randn(2, 4, 5, 5)
        base = denoiser_predict(net, z, 0.5)
        attach_scorenet_adapters(net, AdapterSpec("denoiser", 2), rng(3))
        assert torch.equal(denoiser_predict(net, z, 0.5), base)

    def test_time_adapter_shifts_all_positions_equally(self):
        torch.manual_seed(4)
        net = ScoreNet(ScoreNetConfig(channels=4, width=8, n_blocks=1, time_dim=16, gn_groups=4))
        created = attach_scorenet_adapters(net, AdapterSpec("denoiser", 2), rng(4))
        block = net.blocks[0]
        temb_a, temb_b = torch.randn(2, 16), torch.randn(2, 16)
        x1, x2 = torch.randn(2, 8, 5, 5), torch.randn(2, 8, 5, 5)
        base_1a, base_2a, base_1b = block(x1, temb_a), block(x2, temb_a), block(x1, temb_b)
        with torch.no_grad():
            created["blocks.0.time_proj"].b.normal_(generator=rng(5))
        # the time-path perturbation enters additively before conv2: its output
        # delta depends on the embedding, not on the spatial input
        delta_1a = block(x1, temb_a) - base_1a
        delta_2a = block(x2, temb_a) - base_2a
        delta_1b = block(x1, temb_b) - base_1b
        assert torch.allclose(delta_1a, delta_2a, atol=1e-5)
        assert not torch.allclose(delta_1a, delta_1b, atol=1e-5)

    def test_detach_restores_base_outputs(self):
        torch.manual_seed(5)
        net = ScoreNet(ScoreNetConfig(channels=4, width=8, n_blocks=2, time_dim=16, gn_groups=4))
        with torch.no_grad():
            net.conv_out.weight.normal_(generator=rng(50))
        z = torch.randn(2, 4, 5, 5)
        base = denoiser_predict(net, z, 0.4)
        created = attach_scorenet_adapters(net, AdapterSpec("denoiser", 2), rng(6))
        with torch.no_grad():
            for adapter in created.values():
                for p in adapter.parameters():
                    p.normal_(generator=rng(7))
        assert not torch.equal(denoiser_predict(net, z, 0.4), base)
        detach_all(net)
        assert torch.equal(denoiser_predict(net, z, 0.4), base)

    def test_attach_context_manager(self):
        torch.manual_seed(6)
        net = ScoreNet(ScoreNetConfig(channels=4, width=8, n_blocks=1, time_dim=16, gn_groups=4))
        with torch.no_grad():
            net.conv_out.weight.normal_(generator=rng(60))
        aset = AdapterSet("rayleigh", {"denoiser": AdapterSpec("denoiser", 2)})
        for path, adapter in attach_scorenet_adapters(net, AdapterSpec("denoiser", 2), rng(8)).items():
            aset.add(path, adapter)
        detach_all(net)
        z = torch.randn(1, 4, 5, 5)
        base = denoiser_predict(net, z, 0.3)
        with torch.no_grad():
            next(iter(aset.adapters.values())).b_spatial.normal_(generator=rng(9))
        with attached(net, aset):
            inside = denoiser_predict(net, z, 0.3)
        after = denoiser_predict(net, z, 0.3)
        assert not torch.equal(inside, base)
        assert torch.equal(after, base)


class TestParamReport:
    def test_reference_accounting_case(self):
        # frozen reference: 35.99M base vs 798.72K adapters
        report = param_report_from_counts({"model": 35_990_000}, {"model": 798_720})
        assert round(report.reduction_factor, 2) == 45.06
        assert round(report.percent_total, 2) == 2.22

    def test_per_role_percentage_arithmetic(self):
        report = param_report_from_counts({"denoiser": 16_210_000}, {"denoiser": 122_880})
        assert round(report.rows[0].percent, 2) == 0.76

    def test_totals_are_row_sums(self):
        original = {"encoder": 1_000, "decoder": 3_000}
        adapter = {"encoder": 100, "decoder": 60}
        report = param_report_from_counts(original, adapter)
        assert report.original_total == 4_000
        assert report.adapter_total == 160
        assert report.reduction_factor == pytest.approx(25.0)
        assert report.percent_total == pytest.approx(4.0)

    def test_render_contains_reduction(self):
        report = param_report_from_counts({"encoder": 1000}, {"encoder": 100})
        text = report.render()
        assert "10.00x" in text and "encoder" in text


class TestPersistence:
    def make_set(self, seed=0):
        aset = AdapterSet("rayleigh", {"encoder": AdapterSpec("encoder", 4)}, base_fingerprint="abc123")
        pair = init_adapter(AdapterSpec("encoder", 4), d=8, k=8, rng=rng(seed))
        with torch.no_grad():
            pair.b.normal_(generator=rng(seed + 1))
        aset.add("encoder.stages.0.blocks.0.attn.q", pair)
        kron = KroneckerConvAdapter(6, 6, 3, AdapterSpec("encoder", 2), rng(seed + 2))
        with torch.no_grad():
            kron.b_spatial.normal_(generator=rng(seed + 3))
        aset.add("scorenet.blocks.0.conv1", kron)
        return aset

    def test_round_trip_exact(self, tmp_path):
        aset = self.make_set()
        path = tmp_path / "rayleigh.adapters"
        save_adapters(aset, path)
        loaded = load_adapters(path, expected_fingerprint="abc123")
        assert loaded.channel_kind == "rayleigh"
        assert sorted(loaded.paths()) == sorted(aset.paths())
        for (p1, a1), (p2, a2) in zip(sorted(aset.items()), sorted(loaded.items())):
            assert p1 == p2
            for t1, t2 in zip(a1.parameters(), a2.parameters()):
                assert torch.equal(t1, t2)
            assert a1.scale == a2.scale

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "bad.adapters"
        path.write_bytes(b"this is not an adapter payload")
        with pytest.raises(AdapterFormatError):
            load_adapters(path)

    def test_non_payload_dict_rejected(self, tmp_path):
        path = tmp_path / "odd.adapters"
        torch.save({"weights": torch.zeros(3)}, path)
        with pytest.raises(AdapterFormatError):
            load_adapters(path)

    def test_fingerprint_mismatch_rejected(self, tmp_path):
        aset = self.make_set()
        path = tmp_path / "rayleigh.adapters"
        save_adapters(aset, path)
        with pytest.raises(AdapterCompatibilityError) as err:
            load_adapters(path, expected_fingerprint="zzz999")
        assert "abc123" in str(err.value) and "zzz999" in str(err.value)

    def test_fingerprint_tracks_base_weights_only(self):
        torch.manual_seed(7)
        net = ScoreNet(ScoreNetConfig(channels=4, width=8, n_blocks=1, time_dim=16, gn_groups=4))
        fp = model_fingerprint(net)
        attach_scorenet_adapters(net, AdapterSpec("denoiser", 2), rng(10))
        assert model_fingerprint(net) == fp  # adapters excluded
        with torch.no_grad():
            net.conv_in.weight.add_(1.0)
        assert model_fingerprint(net) != fp
