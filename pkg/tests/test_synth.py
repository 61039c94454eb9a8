import math

import numpy as np
import pytest
import torch

from vecloc.bev import make_pyramid_specs, rasterize_semantic_gt
from vecloc.geometry import GridSpec, Pose6, compose, relative_offset
from vecloc.map_core import MapElement, SemanticType
from vecloc.matcher import Matcher, MatcherDims, configure_oracle_scoring
from vecloc.solver import SolverConfig, solve_multilevel
from vecloc.synth import (OracleSignatures, SceneSpec, ablate_landmarks,
                          augment_lidar_rotation, augment_world_rotation,
                          generate_scene, make_frame, perturb_pose,
                          render_oracle_bev)

DIMS = MatcherDims(channels=8, heads=2, points=2, layers=1, ffn_hidden=16,
                   score_hidden=16, pyramid_channels=(8, 6, 4))


def _sigs(seed=0, target=math.log(9.0)):
    return OracleSignatures.from_matcher(Matcher(DIMS, seed=seed), target)


class TestGenerateScene:
    def test_zero_densities_lanes_only(self):
        spec = SceneSpec(seed=1, poles_per_km=0, signs_per_km=0, surfels_per_km=0,
                         crossings_per_km=0, markings_per_km=0)
        vmap, _ = generate_scene(spec)
        kinds = {el.sem for el in vmap.elements}
        assert kinds == {SemanticType.LANE_LINE, SemanticType.ROAD_BOUNDARY}

    def test_seed_determinism(self):
        spec = SceneSpec(seed=7)
        a, _ = generate_scene(spec)
        b, _ = generate_scene(spec)
        assert len(a) == len(b)
        for ea, eb in zip(a.elements, b.elements):
            assert ea.id == eb.id and ea.sem is eb.sem
            np.testing.assert_array_equal(ea.geom, eb.geom)

    def test_counts_track_densities(self):
        for seed in range(10):
            spec = SceneSpec(seed=seed, road_length=1000.0, poles_per_km=80,
                             signs_per_km=40, surfels_per_km=200)
            vmap, _ = generate_scene(spec)
            for sem, density in ((SemanticType.POLE, 80),
                                 (SemanticType.TRAFFIC_SIGN, 40),
                                 (SemanticType.SURFEL, 200)):
                count = sum(1 for el in vmap.elements if el.sem is sem)
                assert abs(count - density) <= 0.1 * density

    def test_trajectory_on_road(self):
        vmap, traj = generate_scene(SceneSpec(seed=3))
        assert len(traj) > 50
        assert all(abs(p.t[2] - 1.8) < 1e-12 for p in traj)


class TestOracleRender:
    def test_noiseless_pole_single_cell_per_layer(self):
        sigs = _sigs()
        specs = make_pyramid_specs(GridSpec.centered(16, 16, 1.0))
        pose = Pose6.from_ypr(0, 0, 1.8, 0)
        el = MapElement.vertical(0, SemanticType.POLE, 2.3, -1.2, 6.0)
        pyr = render_oracle_bev([el], pose, sigs, specs)
        for layer, grid in enumerate(pyr.layers):
            occupied = (grid.data.abs().sum(dim=-1) > 0).sum()
            assert int(occupied) == 1

    def test_empty_map_noise_statistics(self):
        sigs = _sigs()
        specs = make_pyramid_specs(GridSpec.centered(32, 32, 0.5))
        pose = Pose6.from_ypr(0, 0, 1.8, 0)
        pyr = render_oracle_bev([], pose, sigs, specs, noise_std=0.7,
                                rng=np.random.default_rng(0))
        values = pyr.layers[2].data.numpy().ravel()
        assert values.size >= 10_000
        assert abs(values.std() - 0.7) < 0.05 * 0.7

    def test_per_layer_noise_levels(self):
        sigs = _sigs()
        specs = make_pyramid_specs(GridSpec.centered(32, 32, 0.5))
        pose = Pose6.from_ypr(0, 0, 1.8, 0)
        pyr = render_oracle_bev([], pose, sigs, specs, noise_std=(0.1, 0.4, 0.9),
                                rng=np.random.default_rng(1))
        stds = [float(g.data.std()) for g in pyr.layers]
        np.testing.assert_allclose(stds, [0.1, 0.4, 0.9], rtol=0.08)

    def test_semantic_probabilities_on_render(self):
        # signatures scaled to dot = ln 9 make occupied cells read 0.9 and
        # unoccupied ones 0.5
        matcher = Matcher(DIMS, seed=0)
        sigs = OracleSignatures.from_matcher(matcher, math.log(9.0))
        specs = make_pyramid_specs(GridSpec.centered(16, 16, 1.0))
        pose = Pose6.from_ypr(0, 0, 1.8, 0)
        elements = [MapElement.vertical(0, SemanticType.POLE, 2.0, 3.0, 5.0),
                    MapElement.segment(1, SemanticType.LANE_LINE, -5, 0, 5, 0)]
        pyr = render_oracle_bev(elements, pose, sigs, specs)
        for layer, grid in enumerate(pyr.layers):
            probs = matcher.semantic_probabilities(grid).detach().numpy()
            occ = rasterize_semantic_gt([elements[0]], pose, grid.spec).numpy() > 0
            assert np.all(probs[SemanticType.POLE.row][occ] > 0.89)
            off = ~(occ | (rasterize_semantic_gt([elements[1]], pose, grid.spec).numpy() > 0))
            np.testing.assert_allclose(probs[SemanticType.POLE.row][off], 0.5,
                                       atol=1e-9)

    def test_overlapping_types_sum(self):
        sigs = _sigs()
        pose = Pose6.from_ypr(0, 0, 1.8, 0)
        a = MapElement.vertical(0, SemanticType.POLE, 1.0, 1.0, 5.0)
        b = MapElement.vertical(1, SemanticType.TRAFFIC_SIGN, 1.0, 1.0, 3.0)
        pyr = render_oracle_bev([a, b], pose, sigs,
                                make_pyramid_specs(GridSpec.centered(8, 8, 1.0)))
        grid = pyr.layers[0]
        occ_cells = torch.nonzero(grid.data.abs().sum(dim=-1) > 0)
        assert len(occ_cells) == 1
        i, j = occ_cells[0]
        want = sigs.per_layer[0][SemanticType.POLE.row] + sigs.per_layer[0][SemanticType.TRAFFIC_SIGN.row]
        np.testing.assert_allclose(grid.data[i, j].numpy(), want, atol=1e-12)

    def test_noise_without_rng_rejected(self):
        sigs = _sigs()
        specs = make_pyramid_specs(GridSpec.centered(8, 8, 1.0))
        with pytest.raises(ValueError):
            render_oracle_bev([], Pose6.from_ypr(0, 0, 1.8, 0), sigs, specs,
                              noise_std=0.5, rng=None)


class TestPerturbPose:
    def test_zero_ranges_identity(self):
        gt = Pose6.from_ypr(3, 4, 1.8, 0.5, 0.01, -0.02)
        init = perturb_pose(gt, (0.0, 0.0, 0.0), np.random.default_rng(0))
        np.testing.assert_allclose(init.t, gt.t, atol=1e-15)
        np.testing.assert_allclose(init.R, gt.R, atol=1e-15)

    def test_recorded_offset_matches_inverse_composition(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            gt = Pose6.from_ypr(*rng.uniform(-10, 10, 3), rng.uniform(-3, 3),
                                rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03))
            init = perturb_pose(gt, (2.0, 2.0, math.radians(2)), rng)
            delta = relative_offset(init, gt)
            back = compose(init, delta)
            np.testing.assert_allclose(back.t[:2], gt.t[:2], atol=1e-12)
            assert abs(back.yaw - gt.yaw) < 1e-12

    def test_offsets_uniform(self):
        gt = Pose6.from_ypr(0, 0, 1.8, 0)
        rng = np.random.default_rng(2)
        draws = np.array([list(relative_offset(gt, perturb_pose(gt, (2, 2, 0.1), rng)))
                          for _ in range(1000)])
        # Kolmogorov-Smirnov style bound against the uniform CDF
        for k, half in enumerate((2.0, 2.0, 0.1)):
            xs = np.sort(draws[:, k])
            cdf = (xs + half) / (2 * half)
            emp = np.arange(1, 1001) / 1000
            assert np.abs(emp - cdf).max() < 0.06  # ~1.63/sqrt(1000) at alpha 0.01


class TestAugmentation:
    def _frame(self, seed=0):
        spec = SceneSpec(seed=seed, road_length=240.0)
        vmap, traj = generate_scene(spec)
        sigs = _sigs(seed)
        specs = make_pyramid_specs(GridSpec.centered(24, 24, 1.0))
        rng = np.random.default_rng(seed)
        return vmap, traj, sigs, specs, rng

    def test_zero_rotation_identity(self):
        vmap, traj, sigs, specs, rng = self._frame()
        frame = make_frame(vmap, traj[10], sigs, specs, rng,
                           perturb_ranges=(1.0, 1.0, 0.02))
        out = augment_lidar_rotation(frame, 0.0)
        np.testing.assert_allclose(out.gt_pose.R, frame.gt_pose.R, atol=1e-15)
        assert torch.allclose(out.pyramid.layers[0].data, frame.pyramid.layers[0].data)

    def test_world_rotation_inverse_restores(self):
        vmap, traj, *_ = self._frame()
        phi = math.radians(37.0)
        m2, p2 = augment_world_rotation(vmap, traj[:5], phi)
        m3, p3 = augment_world_rotation(m2, p2, -phi)
        for a, b in zip(vmap.elements, m3.elements):
            np.testing.assert_allclose(a.geom, b.geom, atol=1e-9)
        for a, b in zip(traj[:5], p3):
            np.testing.assert_allclose(a.t, b.t, atol=1e-9)
            np.testing.assert_allclose(a.R, b.R, atol=1e-9)

    def test_world_rotation_solve_equivariance(self):
        # same-seed frames from the rotated world give the same local estimate;
        # exact-rerender conditions: identical element set (window covers the
        # whole map) and a fixed per-segment sample count
        vmap, traj, sigs, specs, _ = self._frame()
        matcher = configure_oracle_scoring(Matcher(DIMS, seed=0))
        sigs = OracleSignatures.from_matcher(matcher, 20.0)
        config = SolverConfig(range_x=1.0, range_y=1.0, range_yaw=math.radians(1.0),
                              n_steps=(5, 5, 5), samples_per_segment=4)
        phi = math.radians(25.0)
        vmap_r, traj_r = augment_world_rotation(vmap, traj, phi)

        def solve_from(m, base):
            frame = make_frame(m, base, sigs, specs, np.random.default_rng(123),
                               perturb_ranges=(0.7, 0.7, math.radians(0.7)),
                               window_margin=1000.0, samples_per_segment=4)
            emb = matcher.embedding_rows([el.sem for el in frame.elements])
            res = solve_multilevel(frame.pyramid, frame.elements, emb,
                                   frame.init_pose, config, matcher)
            return relative_offset(frame.init_pose, res.final_pose)

        base_est = solve_from(vmap, traj[12])
        rot_est = solve_from(vmap_r, traj_r[12])
        np.testing.assert_allclose(list(base_est), list(rot_est), atol=1e-6)

    def test_lidar_rotation_rerenders_consistently(self):
        vmap, traj, sigs, specs, rng = self._frame()
        frame = make_frame(vmap, traj[8], sigs, specs, rng,
                           perturb_ranges=(0.5, 0.5, 0.01))
        theta = math.radians(15.0)
        out = augment_lidar_rotation(frame, theta)
        # plane normal is unchanged by a sensor-frame z rotation
        np.testing.assert_allclose(out.gt_pose.plane_normal,
                                   frame.gt_pose.plane_normal, atol=1e-12)
        assert not torch.equal(out.pyramid.layers[0].data, frame.pyramid.layers[0].data)


class TestAblation:
    def _frame(self):
        spec = SceneSpec(seed=5, road_length=240.0)
        vmap, traj = generate_scene(spec)
        sigs = _sigs(5)
        specs = make_pyramid_specs(GridSpec.centered(24, 24, 1.0))
        return make_frame(vmap, traj[10], sigs, specs, np.random.default_rng(5),
                          perturb_ranges=(0.5, 0.5, 0.01))

    def test_zero_probability_unchanged(self):
        frame = self._frame()
        out = ablate_landmarks(frame, {SemanticType.POLE: 0.0},
                               np.random.default_rng(0))
        assert len(out.elements) == len(frame.elements)

    def test_probability_one_removes_type(self):
        frame = self._frame()
        out = ablate_landmarks(frame, {SemanticType.LANE_LINE: 1.0},
                               np.random.default_rng(0))
        assert all(el.sem is not SemanticType.LANE_LINE for el in out.elements)
        assert any(el.sem is SemanticType.LANE_LINE for el in frame.elements)

    def test_empirical_rate_binomial(self):
        frame = self._frame()
        p = 0.3
        n = 1000
        rng = np.random.default_rng(9)
        hits = 0
        for _ in range(n):
            out = ablate_landmarks(frame, {SemanticType.ROAD_BOUNDARY: p}, rng)
            if all(el.sem is not SemanticType.ROAD_BOUNDARY for el in out.elements):
                hits += 1
        sigma = math.sqrt(p * (1 - p) / n)
        assert abs(hits / n - p) < 3 * sigma

    def test_invalid_probability_rejected(self):
        frame = self._frame()
        with pytest.raises(ValueError):
            ablate_landmarks(frame, {SemanticType.POLE: 1.5}, np.random.default_rng(0))


class TestFrame:
    def test_gt_rasters_match_rasterize(self):
        frame = TestAblation._frame(self)
        for layer in range(3):
            rasters = frame.gt_rasters(layer)
            for sem in SemanticType:
                els = [el for el in frame.elements if el.sem is sem]
                want = rasterize_semantic_gt(els, frame.gt_pose,
                                             frame.specs[layer],
                                             frame.samples_per_segment)
                assert torch.equal(rasters[sem.row], want)

    def test_exceeds_search_flag(self):
        spec = SceneSpec(seed=5, road_length=240.0)
        vmap, traj = generate_scene(spec)
        sigs = _sigs(5)
        specs = make_pyramid_specs(GridSpec.centered(24, 24, 1.0))
        frame = make_frame(vmap, traj[10], sigs, specs, np.random.default_rng(1),
                           perturb_ranges=(2.0, 2.0, 0.01),
                           solver_ranges=(0.001, 0.001, 1.0))
        assert frame.offset_exceeds_search
