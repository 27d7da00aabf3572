import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from stamp.backbone import (
    ArchitectureError,
    LayerSpec,
    PrunedArchitecture,
    build_network,
    count_costs,
    extract_subnetwork,
    fold_masks,
    full_keep,
    gradients,
    hard_masks,
    make_architecture,
    network_from_config,
)

D = torch.float64


def random_keep(net, rng):
    keep = {}
    for name in net.mask_names:
        w = net.widths[name]
        k = int(rng.integers(1, w + 1))
        keep[name] = sorted(rng.choice(w, size=k, replace=False).tolist())
    return keep


@pytest.fixture(params=["mini_vgg", "mini_resnet"])
def arch(request):
    return request.param


class TestBuild:
    def test_vgg_logit_shape(self):
        net = build_network("mini_vgg", (1, 16, 16), 4)
        assert net(torch.randn(5, 1, 16, 16)).shape == (5, 4)
        assert len(net.conv_specs) == 6

    def test_resnet_shape_and_shortcuts(self):
        net = build_network("mini_resnet", (1, 16, 16), 4)
        assert net(torch.randn(3, 1, 16, 16)).shape == (3, 4)
        kinds = [s.kind for s in net.conv_specs]
        assert kinds.count("shortcut_conv1x1") == 3
        for s in net.conv_specs:
            if s.kind == "shortcut_conv1x1":
                assert s.kernel == 1

    def test_shortcut_when_dims_differ(self):
        net = build_network("mini_resnet", (1, 16, 16), 4)
        for k in range(net.n_blocks):
            prev = "stem" if k == 0 else f"block{k - 1}.out"
            if net.widths[prev] != net.widths[f"block{k}.out"]:
                assert any(s.name == f"block{k}.shortcut" for s in net.conv_specs)

    def test_seed_determinism(self, arch):
        a = build_network(arch, seed=3)
        b = build_network(arch, seed=3)
        c = build_network(arch, seed=4)
        for (n, p), q in zip(a.state_dict().items(), b.state_dict().values()):
            assert torch.equal(p, q), n
        assert not torch.equal(a.unit(a.mask_names[0]).weight, c.unit(c.mask_names[0]).weight)

    def test_he_init_scale(self):
        net = build_network("mini_vgg", (1, 16, 16), 4, widths=[64] * 6, seed=0)
        w = net.unit("conv3").weight
        assert w.std().item() == pytest.approx(np.sqrt(2 / (64 * 9)), rel=0.05)

    def test_unknown_arch(self):
        with pytest.raises(ArchitectureError):
            build_network("alexnet")

    def test_config_roundtrip(self, arch):
        net = build_network(arch, (1, 12, 12), 3, seed=2)
        again = network_from_config(net.config())
        assert again.config() == net.config()

    def test_layerspec_invariants(self):
        with pytest.raises(ArchitectureError):
            LayerSpec("s", "shortcut_conv1x1", 2, 2, kernel=3)
        with pytest.raises(ArchitectureError):
            LayerSpec("p", "pool", 2, 2, kernel=2, maskable=True)

    def test_adjacent_channels_compatible(self, arch):
        net = build_network(arch)
        for s in net.conv_specs:
            expected_in = net.in_shape[0] if s.in_mask is None else net.widths[s.in_mask]
            assert s.in_channels == expected_in
            assert s.out_channels == net.widths[s.out_mask]


class TestMaskedForward:
    def test_all_ones_identity(self, arch):
        net = build_network(arch, dtype=D)
        x = torch.randn(4, 1, 16, 16, dtype=D)
        ones = {n: torch.ones(w, dtype=D) for n, w in net.widths.items()}
        assert torch.equal(net(x, ones), net(x))

    def test_zero_mask_annihilates(self, arch):
        net = build_network(arch, dtype=D)
        x = torch.randn(4, 1, 16, 16, dtype=D)
        name = net.mask_names[1]
        masks = {n: torch.ones(w, dtype=D) for n, w in net.widths.items()}
        masks[name][2] = 0.0
        before = net(x, masks)
        # perturb every filter that writes into channel 2 of this mask point
        with torch.no_grad():
            for s in net.conv_specs:
                if s.out_mask == name:
                    net.unit(s.name).weight[2] += 5.0
                    net.unit(s.name).scale[2] += 1.0
        assert torch.allclose(net(x, masks), before, atol=1e-6)

    def test_half_mask_equals_halved_outgoing_filters(self):
        net = build_network("mini_vgg", dtype=D)
        x = torch.randn(4, 1, 16, 16, dtype=D)
        masks = {"conv5": torch.full((64,), 0.5, dtype=D)}
        halved = build_network("mini_vgg", dtype=D)
        halved.load_state_dict(net.state_dict())
        with torch.no_grad():
            halved.head.weight.mul_(0.5)
        assert torch.allclose(net(x, masks), halved(x), atol=1e-12)
        masks = {"conv2": torch.full((32,), 0.5, dtype=D)}
        halved.load_state_dict(net.state_dict())
        with torch.no_grad():
            halved.unit("conv3").weight.mul_(0.5)
        # conv3 is followed by batch-statistics normalization, which has a small eps
        assert torch.allclose(net(x, masks), halved(x), atol=1e-4)

    def test_linearity_in_last_mask_coordinate(self, arch):
        net = build_network(arch, dtype=D)
        x = torch.randn(3, 1, 16, 16, dtype=D)
        last = net.mask_names[-1]
        base = {n: torch.rand(w, dtype=D, generator=torch.Generator().manual_seed(1)) for n, w in net.widths.items()}

        def at(v):
            m = {k: t.clone() for k, t in base.items()}
            m[last][3] = v
            return net(x, m)

        y0, y1, y2 = at(0.0), at(0.4), at(0.8)
        assert torch.allclose(y1 - y0, y2 - y1, atol=1e-6)

    def test_mask_length_mismatch(self):
        net = build_network("mini_vgg")
        with pytest.raises(ArchitectureError):
            net(torch.randn(1, 1, 16, 16), {"conv0": torch.ones(3)})

    def test_per_example_masks(self):
        net = build_network("mini_vgg", dtype=D)
        x = torch.randn(2, 1, 16, 16, dtype=D)
        shared = {"conv1": torch.rand(16, dtype=D)}
        stacked = {"conv1": shared["conv1"].expand(2, 16)}
        assert torch.allclose(net(x, shared), net(x, stacked))


class TestGradients:
    def test_quadratic_closed_form(self):
        W = torch.randn(3, 4, dtype=D, requires_grad=True)
        x = torch.randn(4, dtype=D)
        (g,) = gradients(lambda: 0.5 * ((W @ x) ** 2).sum(), [W])
        expected = torch.outer(W.detach() @ x, x)
        assert torch.max(torch.abs(g - expected) / expected.abs().clamp_min(1e-12)).item() <= 1e-10

    def test_non_finite_loss(self):
        w = torch.ones(1, requires_grad=True)
        with pytest.raises(FloatingPointError):
            gradients(lambda: w * float("nan"), [w])

    def test_zero_mask_zero_filter_gradient(self):
        net = build_network("mini_vgg", dtype=D)
        x = torch.randn(4, 1, 16, 16, dtype=D)
        y = torch.tensor([0, 1, 2, 3])
        masks = {"conv3": torch.ones(32, dtype=D)}
        masks["conv3"][5] = 0.0
        w = net.unit("conv3").weight
        (g,) = gradients(lambda: F.cross_entropy(net(x, masks), y), [w])
        assert torch.all(g[5] == 0)
        assert g[4].abs().sum() > 0

    def test_finite_differences(self):
        net = build_network("mini_vgg", (1, 8, 8), 3, widths=[3, 3, 4, 4, 5, 5], seed=1, dtype=D)
        x = torch.randn(4, 1, 8, 8, dtype=D, generator=torch.Generator().manual_seed(0))
        y = torch.tensor([0, 1, 2, 0])
        masks = {n: torch.rand(w, dtype=D, generator=torch.Generator().manual_seed(2)) + 0.2
                 for n, w in net.widths.items()}
        params = list(net.parameters())
        loss = lambda: F.cross_entropy(net(x, masks), y)  # noqa: E731
        grads = gradients(loss, params)
        rng = np.random.default_rng(0)
        h = 1e-4
        for _ in range(50):
            i = int(rng.integers(len(params)))
            p, g = params[i], grads[i]
            j = int(rng.integers(p.numel()))
            with torch.no_grad():
                p.view(-1)[j] += h
                up = loss().item()
                p.view(-1)[j] -= 2 * h
                down = loss().item()
                p.view(-1)[j] += h
            fd = (up - down) / (2 * h)
            an = g.view(-1)[j].item()
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-6) + 1e-8


class TestCosts:
    def test_single_conv_hand_count(self):
        net = build_network("mini_vgg", (2, 8, 8), 1, widths=[4], seed=0)
        params, flops = count_costs(net)
        # 3*3*2*4 = 72 weights, 72 * 64 positions = 4608 MACs, plus the 4x1 head
        assert (params, flops) == (72 + 4, 4608 + 4)

    def test_vgg_hand_count(self):
        net = build_network("mini_vgg", (1, 8, 8), 3, widths=[2, 3, 4, 5, 6, 7])
        params, flops = count_costs(net)
        conv_params = [18, 54, 108, 180, 270, 378]
        conv_flops = [1152, 3456, 1728, 2880, 1080, 1512]
        assert params == sum(conv_params) + 21
        assert flops == sum(conv_flops) + 21

    def test_full_ratio_is_one(self, arch):
        net = build_network(arch)
        a = make_architecture(net, full_keep(net))
        assert a.params_ratio == 1.0 and a.flops_ratio == 1.0

    def test_half_channels_quarter_flops(self):
        net = build_network("mini_vgg")
        keep = {n: list(range(w // 2)) for n, w in net.widths.items()}
        a = make_architecture(net, keep)
        # interior layers scale by 1/4; conv0 (single input channel) and the head by 1/2
        full = [9 * s.in_channels * s.out_channels * s.out_hw[0] * s.out_hw[1] for s in net.conv_specs]
        kept = [full[0] / 2] + [f / 4 for f in full[1:]]
        head = 64 * 4
        assert a.flops_kept == sum(kept) + head / 2
        assert 0.25 < a.flops_ratio < 0.27

    def test_monotone_removal(self, arch):
        net = build_network(arch)
        rng = np.random.default_rng(1)
        keep = random_keep(net, rng)
        p0, f0 = count_costs(net, keep)
        for name in net.mask_names:
            if len(keep[name]) > 1:
                smaller = dict(keep)
                smaller[name] = keep[name][1:]
                p1, f1 = count_costs(net, smaller)
                assert p1 < p0 and f1 < f0

    def test_invalid_keep(self):
        net = build_network("mini_vgg")
        keep = full_keep(net)
        keep["conv1"] = []
        with pytest.raises(ArchitectureError):
            count_costs(net, keep)
        keep["conv1"] = [3, 2]
        with pytest.raises(ArchitectureError):
            count_costs(net, keep)
        keep["conv1"] = [0, 16]
        with pytest.raises(ArchitectureError):
            count_costs(net, keep)

    def test_architecture_json_roundtrip(self):
        net = build_network("mini_vgg")
        a = make_architecture(net, random_keep(net, np.random.default_rng(2)))
        b = PrunedArchitecture.from_dict(a.to_dict())
        assert b == a


class TestExtraction:
    def test_keep_all(self, arch):
        net = build_network(arch, dtype=D)
        small = extract_subnetwork(net, full_keep(net))
        x = torch.randn(6, 1, 16, 16, dtype=D)
        assert torch.allclose(small(x), net(x), atol=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2 ** 31 - 1), arch=st.sampled_from(["mini_vgg", "mini_resnet"]))
    def test_equals_hard_masked_forward(self, seed, arch):
        net = build_network(arch, seed=seed % 97, dtype=D)
        keep = random_keep(net, np.random.default_rng(seed))
        small = extract_subnetwork(net, keep)
        x = torch.randn(16, 1, 16, 16, dtype=D, generator=torch.Generator().manual_seed(seed))
        assert torch.allclose(small(x), net(x, hard_masks(net, keep)), atol=1e-5)
        assert sum(p.numel() for p in small.conv_parameters()) < sum(p.numel() for p in net.conv_parameters()) \
            or keep == full_keep(net)

    def test_resnet_uneven_blocks(self):
        net = build_network("mini_resnet")
        keep = full_keep(net)
        keep["block0.a"] = [0, 1]
        keep["block1.out"] = [3]
        keep["block2.a"] = list(range(40))
        small = extract_subnetwork(net, keep)
        assert small(torch.randn(2, 1, 16, 16)).shape == (2, 4)

    def test_fold_then_extract(self, arch):
        net = build_network(arch, dtype=D)
        rng = np.random.default_rng(3)
        em = {n: torch.as_tensor(rng.uniform(0, 1, w)) for n, w in net.widths.items()}
        keep = {n: sorted(np.flatnonzero(em[n].numpy() > 0.3).tolist()) or [0] for n in net.mask_names}
        for n in net.mask_names:
            em[n][[i for i in range(net.widths[n]) if i not in keep[n]]] = 0.0
        x = torch.randn(8, 1, 16, 16, dtype=D)
        compact = extract_subnetwork(fold_masks(net, em), keep)
        assert torch.allclose(compact(x), net(x, em), atol=1e-6)

    def test_empty_keep_rejected(self):
        net = build_network("mini_vgg")
        keep = full_keep(net)
        keep["conv4"] = []
        with pytest.raises(ArchitectureError):
            extract_subnetwork(net, keep)
