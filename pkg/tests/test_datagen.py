import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare, norm

from respcvae.barrier import BarrierConfig
from respcvae.dynamics import AgentPhysState, RelativeState
from respcvae.errors import InvalidInputError, ParseError
from respcvae.safety_filter import FilterConfig, project_batch
from respcvae.sequence import flatten_scene
from respcvae.data.agents import desired_control, desired_control_arrays, select_agents
from respcvae.data.corridor import (
    CorridorConfig,
    corridor_states,
    corridor_u_des,
    filtered_controls,
    gamma_density,
    gen_corridor_dataset,
    sample_gamma_arrays,
    sample_synthetic_gamma,
    skewed_mode_means,
)
from respcvae.data.dataset import Dataset, load_dataset, save_dataset
from respcvae.data.intersection import (
    IntersectionConfig,
    gen_intersection_dataset,
    min_pair_distance,
    simulate_episode,
    slice_episode,
)
from respcvae.data.tracks_csv import episode_to_tracks, load_tracks_csv, window, write_tracks_csv

FCFG = FilterConfig()


def rel_at(gap):
    return RelativeState(np.array([gap, 0.0]), np.array([-2.0, 0.0]))


class TestSyntheticGamma:
    def test_degenerate_modes(self):
        cfg = CorridorConfig(mode_std=0.0, skew_slope=0.0)
        g = sample_synthetic_gamma(rel_at(8.0), cfg, np.random.default_rng(0), size=200)
        hits = np.isclose(g, [0.8, 0.2]).all(1) | np.isclose(g, [0.2, 0.8]).all(1)
        assert hits.all()
        assert 0.3 < np.isclose(g, [0.8, 0.2]).all(1).mean() < 0.7

    def test_weight_one_is_unimodal(self):
        cfg = CorridorConfig(mixture_weight=1.0, skew_slope=0.0)
        g = sample_synthetic_gamma(rel_at(8.0), cfg, np.random.default_rng(1), size=2000)
        assert abs(g[:, 0].mean() - 0.8) < 0.01
        assert g[:, 0].min() > 0.5

    def test_skew_moves_modes_apart(self):
        cfg = CorridorConfig()
        near, far = skewed_mode_means(5.0, cfg), skewed_mode_means(12.0, cfg)
        np.testing.assert_allclose(near[0], [0.85, 0.15])
        np.testing.assert_allclose(far[1], [0.08, 0.92])

    def test_skewed_means_clamped(self):
        m = skewed_mode_means(np.array([500.0]), CorridorConfig())
        assert m.min() >= 0 and m.max() <= 1

    def test_histogram_matches_analytic_density(self):
        cfg = CorridorConfig()
        gap = 9.0
        rng = np.random.default_rng(2)
        g, _ = sample_gamma_arrays(np.full(100_000, gap), cfg, rng)
        edges = np.linspace(0.0, 1.0, 41)
        counts, _ = np.histogram(g[:, 0], bins=edges)
        means = skewed_mode_means(gap, cfg)[:, 0]
        cdf = 0.5 * norm.cdf(edges[:, None], means, cfg.mode_std).sum(-1)
        probs = np.diff(cdf)
        keep = probs * 1e5 > 5
        expected = probs[keep] / probs[keep].sum() * counts[keep].sum()
        assert chisquare(counts[keep], expected).pvalue > 1e-3

    def test_density_integrates_to_one(self):
        x = np.linspace(-0.5, 1.5, 20001)
        d = gamma_density(x, 7.0, CorridorConfig())
        assert np.trapezoid(d, x) == pytest.approx(1.0, abs=1e-6)

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            CorridorConfig(mixture_weight=1.5)
        with pytest.raises(InvalidInputError):
            CorridorConfig(x_gap_range=(3.0, 1.0))


@pytest.fixture(scope="module")
def data():
    return gen_corridor_dataset(CorridorConfig(), 2000, FCFG, np.random.default_rng(0), seed=0)


class TestCorridorDataset:
    def test_single_datum_reproducible(self):
        a = gen_corridor_dataset(CorridorConfig(), 1, FCFG, np.random.default_rng(5))
        b = gen_corridor_dataset(CorridorConfig(), 1, FCFG, np.random.default_rng(5))
        np.testing.assert_array_equal(a.u, b.u)
        assert len(a) == 1

    def test_same_seed_byte_identical_archive(self, tmp_path):
        for name in ("a.zip", "b.zip"):
            ds = gen_corridor_dataset(CorridorConfig(), 50, FCFG, np.random.default_rng(3), seed=3)
            save_dataset(tmp_path / name, ds)
        assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()

    def test_truth_gamma_reproduces_controls(self, data):
        fb = project_batch(data.u_des, data.pos, data.vel, data.truth["gamma"], FCFG)
        np.testing.assert_allclose(fb.u, data.u, atol=1e-9)

    def test_gamma_floor(self, data):
        assert data.truth["gamma"].min() >= CorridorConfig().gamma_floor

    def test_far_apart_is_ridge_shrunk(self):
        pos, vel = corridor_states(np.array([200.0]), np.zeros(1), np.ones(1), np.ones(1))
        ud = corridor_u_des(1, CorridorConfig())
        g = np.array([[0.7, 0.4]])
        u, eps, ok = filtered_controls(pos, vel, ud, g, FCFG)
        np.testing.assert_allclose(u[0], ud[0] * (g[0] / (g[0] + FCFG.beta1))[:, None], atol=1e-8)
        assert ok.all() and eps[0] < 1e-9

    def test_controls_bounded_and_finite(self, data):
        assert np.all(np.isfinite(data.u)) and np.abs(data.u).max() <= FCFG.u_bound + 1e-9

    def test_two_branch_cross_section(self, data):
        # near gaps the constraint binds: the mode decides which agent gives way
        close = data.pos[:, 1, 0] < 7.0
        ux = data.u[:, 0, 0]
        mode = data.truth["mode"]
        a, b = ux[close & (mode == 0)], ux[close & (mode == 1)]
        assert np.median(a) - np.median(b) > 0.5

    def test_split_by_episode_disjoint(self, data):
        tr, te = data.split_by_episode(0.8, np.random.default_rng(0))
        assert len(tr) + len(te) == len(data)
        assert not set(tr.episode) & set(te.episode)

    def test_archive_round_trip(self, data, tmp_path):
        save_dataset(tmp_path / "d.zip", data)
        back = load_dataset(tmp_path / "d.zip")
        np.testing.assert_array_equal(back.u, data.u)
        np.testing.assert_array_equal(back.truth["gamma"], data.truth["gamma"])
        assert back.meta["generator"] == "corridor"

    def test_rejects_bad_count(self):
        with pytest.raises(InvalidInputError):
            gen_corridor_dataset(CorridorConfig(), 0, FCFG, np.random.default_rng(0))

    def test_dataset_rejects_nonfinite_controls(self, data):
        d = data.take(np.arange(3))
        d.u[0, 0, 0] = np.nan
        with pytest.raises(InvalidInputError):
            Dataset(d.tokens, d.valid, d.pos, d.vel, d.agent_valid, d.u_des, d.u, d.episode, d.agent_ids)


class TestDesiredControl:
    def test_at_target_zero(self):
        u = desired_control(AgentPhysState([0, 0], [10.0, 0.0]), 10.0, 0.5)
        np.testing.assert_allclose(u.acceleration, [0.0, 0.0], atol=1e-12)

    def test_at_rest_uses_heading(self):
        u = desired_control(AgentPhysState([0, 0], [0.0, 0.0]), 10.0, 0.5, heading=0.0)
        np.testing.assert_allclose(u.acceleration, [5.0, 0.0])

    def test_clipped(self):
        u = desired_control(AgentPhysState([0, 0], [0.0, 0.0]), 10.0, 0.5, u_bound=4.0, heading=np.pi / 2)
        np.testing.assert_allclose(u.acceleration, [0.0, 4.0], atol=1e-12)

    def test_velocity_direction_used_when_moving(self):
        u = desired_control_arrays(np.zeros((1, 2)), np.array([[0.0, 2.0]]), 10.0, 0.5, heading=np.array([0.0]))
        np.testing.assert_allclose(u, [[0.0, 4.0]])

    def test_gain_must_be_positive(self):
        with pytest.raises(InvalidInputError):
            desired_control(AgentPhysState([0, 0], [1, 0]), 10.0, 0.0)


class TestSelectAgents:
    def test_fewer_than_max_keeps_all(self):
        assert sorted(select_agents([[0, 0], [1, 0]], [7, 3], 7, 4)) == [3, 7]

    def test_tie_goes_to_lower_id(self):
        keep = select_agents([[0, 0], [1, 0], [-1, 0]], [1, 9, 4], 1, 2)
        assert keep == [1, 4]

    def test_matches_brute_force_sort(self):
        rng = np.random.default_rng(4)
        pos = rng.normal(size=(9, 2)) * 10
        ids = rng.permutation(100)[:9]
        ego = ids[3]
        d = np.linalg.norm(pos - pos[3], axis=1)
        others = sorted((float(d[k]), int(ids[k])) for k in range(9) if k != 3)
        assert select_agents(pos, ids, ego, 6) == [int(ego)] + [i for _, i in others[:5]]

    def test_ego_absent(self):
        with pytest.raises(InvalidInputError):
            select_agents([[0, 0]], [1], 2, 3)


class TestIntersection:
    cfg = IntersectionConfig()

    def test_single_agent_approaches_preferred_speed(self):
        ep = simulate_episode(self.cfg, np.random.default_rng(0), schedule=[(0, 0, 6.0, 10.0)])
        v = np.linalg.norm(ep.vel[ep.present[:, 0], 0], axis=-1)
        assert np.all(np.diff(v) >= -1e-12)
        assert v[-1] == pytest.approx(10.0, abs=0.2)
        np.testing.assert_allclose(v, ep.desired_speed[ep.present[:, 0], 0], atol=1e-12)

    def test_later_arrival_yields(self):
        # both reach the crossing together; the one arriving later must slow
        sched = [(0, 0, 10.0, 10.0), (3, 2, 10.0, 10.0)]
        ep = simulate_episode(self.cfg, np.random.default_rng(0), schedule=sched)
        both = ep.present[:, 0] & ep.present[:, 1]
        v1 = np.linalg.norm(ep.vel[:, 1], axis=-1)
        dip = ep.desired_speed[both, 1] - v1[both]
        assert dip.max() > 2.0
        v0 = np.linalg.norm(ep.vel[:, 0], axis=-1)
        np.testing.assert_allclose(v0[both], ep.desired_speed[both, 0], atol=1e-9)

    def test_no_d_min_violations(self):
        rng = np.random.default_rng(11)
        d_min = BarrierConfig().d_min
        for _ in range(30):
            assert min_pair_distance(simulate_episode(self.cfg, rng)) >= d_min

    def test_seed_determinism(self):
        a = gen_intersection_dataset(self.cfg, 3, np.random.default_rng(7))
        b = gen_intersection_dataset(self.cfg, 3, np.random.default_rng(7))
        np.testing.assert_array_equal(a.tokens, b.tokens)
        np.testing.assert_array_equal(a.u, b.u)

    def test_histories_respect_presence(self):
        ds, eps = gen_intersection_dataset(self.cfg, 3, np.random.default_rng(8), return_episodes=True)
        assert np.all(ds.tokens[~ds.valid] == 0)
        for k in range(0, len(ds), 37):
            ep = eps[ds.episode[k]]
            f = None
            for cand in range(ep.n_frames):
                ego = ds.agent_ids[k, 0]
                if ep.present[cand, ego] and np.allclose(ep.vel[cand, ego], ds.vel[k, 0]) \
                        and np.allclose(ds.u[k, 0], ep.acc[cand, ego]):
                    f = cand
                    break
            assert f is not None
            for n in np.flatnonzero(ds.agent_valid[k]):
                frames = np.arange(f - self.cfg.t_max + 1, f + 1)
                np.testing.assert_array_equal(ds.valid[k, :, n], ep.present[frames, ds.agent_ids[k, n]])

    def test_future_consistent_with_control(self):
        ds = gen_intersection_dataset(self.cfg, 2, np.random.default_rng(9))
        fut, fv = ds.truth["future_pos"], ds.truth["future_valid"]
        dt = self.cfg.dt
        pred = ds.pos + ds.vel * dt + 0.5 * ds.u * dt**2
        m = fv[:, 0] & ds.agent_valid
        np.testing.assert_allclose(fut[:, 0][m], pred[m], atol=1e-9)

    def test_ego_at_origin(self):
        ds = gen_intersection_dataset(self.cfg, 2, np.random.default_rng(10))
        np.testing.assert_allclose(ds.pos[:, 0], 0.0, atol=1e-12)

    def test_slices_have_ego_first(self):
        ep = simulate_episode(self.cfg, np.random.default_rng(1))
        rows = slice_episode(ep, self.cfg)
        assert all(r["agent_valid"][0] for r in rows)


class TestTracksCsv:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("")
        assert load_tracks_csv(p) == {}

    def test_two_row_fixture(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text(
            "track_id,frame_id,timestamp_ms,agent_type,x,y,vx,vy,psi_rad,length,width\n"
            "1,1,100,car,0.0,0.0,1.0,0.0,0.0,4.5,1.8\n"
            "1,2,200,car,0.1,0.0,1.0,0.0,0.0,4.5,1.8\n"
        )
        tracks = load_tracks_csv(p)
        assert list(tracks) == [1]
        assert len(tracks[1]) == 2

    def test_round_trip_generated_episode(self, tmp_path):
        cfg = IntersectionConfig()
        ep = simulate_episode(cfg, np.random.default_rng(3))
        tracks = episode_to_tracks(ep, cfg.dt)
        write_tracks_csv(tmp_path / "ep.csv", tracks)
        back = load_tracks_csv(tmp_path / "ep.csv")
        assert list(back) == list(tracks)
        for tid, tr in tracks.items():
            np.testing.assert_allclose(back[tid].position, tr.position, rtol=0, atol=1e-9)
            np.testing.assert_allclose(back[tid].velocity, tr.velocity, rtol=0, atol=1e-9)
            np.testing.assert_array_equal(back[tid].frames, tr.frames)

    def test_finite_difference_velocity(self, tmp_path):
        p = tmp_path / "fd.csv"
        rows = ["track_id,frame_id,timestamp_ms,agent_type,x,y"]
        rows += [f"4,{k},{100 * k},car,{2.0 * 0.1 * k},{-1.0 * 0.1 * k}" for k in range(5)]
        p.write_text("\n".join(rows) + "\n")
        tr = load_tracks_csv(p)[4]
        np.testing.assert_allclose(tr.velocity, np.tile([2.0, -1.0], (5, 1)), atol=1e-9)
        np.testing.assert_allclose(tr.heading, np.arctan2(-1.0, 2.0))

    def test_missing_column(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("track_id,frame_id,x,y\n1,1,0,0\n")
        with pytest.raises(ParseError) as info:
            load_tracks_csv(p)
        assert info.value.line == 1

    def test_non_monotone_frames(self, tmp_path):
        p = tmp_path / "n.csv"
        p.write_text(
            "track_id,frame_id,timestamp_ms,agent_type,x,y\n"
            "1,2,200,car,0,0\n"
            "1,1,100,car,0,0\n"
        )
        with pytest.raises(ParseError) as info:
            load_tracks_csv(p)
        assert info.value.line == 3

    def test_malformed_number(self, tmp_path):
        p = tmp_path / "b.csv"
        p.write_text(
            "track_id,frame_id,timestamp_ms,agent_type,x,y\n"
            "1,1,100,car,0,0\n"
            "1,2,200,car,abc,0\n"
        )
        with pytest.raises(ParseError, match="line 3"):
            load_tracks_csv(p)

    def test_window_feeds_flatten_scene(self):
        cfg = IntersectionConfig()
        ep = simulate_episode(cfg, np.random.default_rng(3))
        tracks = episode_to_tracks(ep, cfg.dt)
        f = int(np.flatnonzero(ep.present.sum(1) >= 2)[20])
        ego = int(np.flatnonzero(ep.present[f])[0])
        seq = flatten_scene(window(tracks, f + 1, 10), t_max=10, n_max=4, ego_id=ego + 1)
        assert seq.agent_ids[0] == ego + 1
        np.testing.assert_allclose(seq.pos[0], ep.pos[f, ego])


@settings(max_examples=25, deadline=None)
@given(st.floats(5.0, 12.0), st.floats(0.0, 1.0))
def test_sampled_gamma_means_follow_skew(gap, weight):
    cfg = CorridorConfig(mixture_weight=weight, mode_std=0.0)
    g, mode = sample_gamma_arrays(np.full(50, gap), cfg, np.random.default_rng(0))
    np.testing.assert_allclose(g, skewed_mode_means(np.full(50, gap), cfg)[np.arange(50), mode])
