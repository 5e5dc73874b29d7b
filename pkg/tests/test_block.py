import numpy as np
import pytest

from crossview.block import (
    FrustumSpec,
    block_forward,
    block_forward_all,
    init_block_params,
)
from crossview.engine import Tensor, backward, check_gradients, no_grad
from crossview.geometry import GridSpec, project
from conftest import ring_poses, rng

C = 8
SIZE = 8
GRID = GridSpec(resolution=8)
FSPEC = FrustumSpec(depth_count=4)


def fixture(seed, n_views=2, channels=C, heads=2, zero_init=False, elevation=15.0):
    g = rng(seed)
    params = init_block_params(g, channels, heads=heads, n_freq=6)
    if not zero_init:
        params.mlp_w2.data = g.normal(size=params.mlp_w2.shape) * 0.2
        params.mlp_b2.data = g.normal(size=params.mlp_b2.shape) * 0.05
    poses = ring_poses(n_views, elevation=elevation, radius=3.0, focal=12.0, size=SIZE)
    maps = [
        Tensor(g.normal(size=(channels, SIZE, SIZE)).astype(np.float64), requires_grad=True)
        for _ in poses
    ]
    return params, poses, maps


class TestZeroInit:
    def test_fresh_block_residual_exactly_zero(self):
        params, poses, maps = fixture(0, zero_init=True)
        res = block_forward(0, maps, poses, GRID, FSPEC, params)
        assert np.count_nonzero(res.data) == 0

    def test_zero_residual_holds_for_all_views(self):
        params, poses, maps = fixture(1, n_views=3, zero_init=True)
        for res in block_forward_all(maps, poses, GRID, FSPEC, params):
            assert np.count_nonzero(res.data) == 0


class TestAttentionNormalization:
    @pytest.mark.parametrize("seed", range(100))
    def test_weights_sum_to_one_with_zero_masked_mass(self, seed):
        g = rng([seed, 13])
        n = int(g.integers(1, 4))
        params, poses, maps = fixture(seed, n_views=n)
        collect = []
        with no_grad():
            block_forward(0, maps, poses, GRID, FSPEC, params, collect=collect)
        assert {tag for tag, _, _ in collect} == {"view", "depth", "cross"}
        for tag, weights, mask in collect:
            sums = weights.sum(axis=-1)
            anyv = mask.max(axis=1) > 0
            np.testing.assert_allclose(sums[anyv], 1.0, atol=1e-6)
            np.testing.assert_array_equal(sums[~anyv], 0.0)
            # masked keys carry exactly zero attention mass
            masked = np.broadcast_to(
                (mask == 0)[:, None, None, :], weights.shape
            )
            np.testing.assert_array_equal(weights[masked], 0.0)

    def test_single_view_weights_are_exactly_one(self):
        params, poses, maps = fixture(3, n_views=1)
        collect = []
        with no_grad():
            block_forward(0, maps, poses, GRID, FSPEC, params, collect=collect)
        tag, weights, mask = next(c for c in collect if c[0] == "view")
        valid = mask.max(axis=1) > 0
        np.testing.assert_array_equal(weights[valid], 1.0)

    def test_identical_tokens_give_uniform_weights(self):
        from crossview.block import _attention

        g = rng(4)
        params, _, _ = fixture(4)
        dep = params.depth_wq.shape[0]
        tokens = np.broadcast_to(g.normal(size=(5, 1, dep)), (5, 4, dep)).copy()
        mask = np.ones((5, 4))
        mask[2, 1:] = 0.0  # one singleton group
        collect = []
        with no_grad():
            _attention(
                Tensor(tokens[:, :1]),
                Tensor(tokens),
                params.depth_wq,
                params.depth_wk,
                params.depth_wv,
                params.depth_wo,
                params.heads,
                mask,
                collect=collect,
                tag="t",
            )
        _, weights, _ = collect[0]
        np.testing.assert_allclose(weights[[0, 1, 3, 4]], 0.25, atol=1e-12)
        np.testing.assert_array_equal(weights[2, :, :, 0], 1.0)
        np.testing.assert_array_equal(weights[2, :, :, 1:], 0.0)


class TestEquivariance:
    def test_view_permutation_equivariance(self):
        params, poses, maps = fixture(5, n_views=3)
        perm = [2, 0, 1]
        with no_grad():
            res = block_forward(1, maps, poses, GRID, FSPEC, params)
            res_p = block_forward(
                perm.index(1),
                [maps[i] for i in perm],
                [poses[i] for i in perm],
                GRID,
                FSPEC,
                params,
            )
        np.testing.assert_allclose(res.data, res_p.data, atol=1e-9)

    def test_forward_all_matches_per_view_calls(self):
        params, poses, maps = fixture(6, n_views=3)
        with no_grad():
            alls = block_forward_all(maps, poses, GRID, FSPEC, params)
            singles = [
                block_forward(i, maps, poses, GRID, FSPEC, params) for i in range(3)
            ]
        for a, s in zip(alls, singles):
            np.testing.assert_array_equal(a.data, s.data)


class TestInformationFlow:
    def test_gradient_reaches_every_view(self):
        params, poses, maps = fixture(7, n_views=3)
        w = rng(70).normal(size=(C, SIZE, SIZE))
        res = block_forward(0, maps, poses, GRID, FSPEC, params)
        backward((res * w).sum())
        for i, m in enumerate(maps):
            assert m.grad is not None and np.abs(m.grad).max() > 0, f"view {i}"

    def test_full_block_gradient_vs_finite_differences(self):
        params, poses, maps = fixture(8, n_views=2)
        w = rng(80).normal(size=(C, SIZE, SIZE))

        def f(a, b):
            res = block_forward(0, [a, b], poses, GRID, FSPEC, params)
            return (res * w).sum()

        check_gradients(f, [maps[0].data, maps[1].data])

    def test_parameter_gradients_vs_directional_fd(self):
        from crossview.engine import directional_derivative

        params, poses, maps = fixture(9, n_views=2)
        w = rng(90).normal(size=(C, SIZE, SIZE))
        names = list(params.named("p.").items())
        loss = (block_forward(0, maps, poses, GRID, FSPEC, params) * w).sum()
        backward(loss)
        g = rng(91)
        for name, tensor in names:
            direction = g.normal(size=tensor.shape)
            analytic = float((tensor.grad * direction).sum())

            def f_dir(arr, t=tensor):
                orig = t.data
                t.data = arr
                try:
                    with no_grad():
                        out = block_forward(0, maps, poses, GRID, FSPEC, params)
                        return float((out.data * w).sum())
                finally:
                    t.data = orig

            fd = directional_derivative(f_dir, [tensor.data], 0, direction, h=1e-5)
            assert abs(analytic - fd) / max(1.0, abs(fd), abs(analytic)) <= 1e-4, name


class TestReachability:
    def test_unreachable_pixels_cannot_influence_other_view(self):
        # Pixels of view 1 outside the bilinear footprint of every voxel
        # projection are never lifted into the grid, so view 0's residual
        # must not move when only those pixels change. A short focal length
        # keeps the projected grid well inside the image.
        g = rng(10)
        size = 16
        params = init_block_params(g, C, heads=2, n_freq=6)
        params.mlp_w2.data = g.normal(size=params.mlp_w2.shape) * 0.2
        poses = ring_poses(2, elevation=0.0, radius=3.0, focal=4.5, size=size)
        maps = [Tensor(g.normal(size=(C, size, size))) for _ in poses]

        uv1, _, front1 = project(GRID.voxel_centers(), poses[1])
        reach = np.zeros((size, size), dtype=bool)
        for u, v in uv1[front1]:
            for uu in (int(np.floor(u)), int(np.ceil(u))):
                for vv in (int(np.floor(v)), int(np.ceil(v))):
                    if 0 <= uu < size and 0 <= vv < size:
                        reach[vv, uu] = True
        unreachable = ~reach
        assert unreachable.any(), "fixture needs pixels outside every voxel footprint"

        with no_grad():
            base = block_forward(0, maps, poses, GRID, FSPEC, params).data
            bumped = maps[1].data.copy()
            bumped[:, unreachable] += 10.0
            moved = block_forward(
                0, [maps[0], Tensor(bumped)], poses, GRID, FSPEC, params
            ).data
        np.testing.assert_array_equal(base, moved)


class TestInputValidation:
    def test_duplicate_poses_rejected(self):
        params, poses, maps = fixture(11, n_views=2)
        with pytest.raises(ValueError, match="distinct"):
            block_forward(0, maps, [poses[0], poses[0]], GRID, FSPEC, params)

    def test_mismatched_shapes_rejected(self):
        params, poses, maps = fixture(12, n_views=2)
        bad = Tensor(np.zeros((C, SIZE, SIZE + 1)))
        with pytest.raises(ValueError):
            block_forward(0, [maps[0], bad], poses, GRID, FSPEC, params)
