import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vtslab import numerics as nx
from vtslab import synthground as sg
from vtslab import training as tr
from vtslab import vts
from vtslab.errors import DimensionError, ValidationError
from vtslab.numerics import RngState

SMALL = sg.SynthTask(frame_count=8, patches_per_frame=2, encoder_dim=6, model_dim=4, query_tokens=3, min_len=2, max_len=4)


class TestTask:
    @pytest.mark.parametrize("kw", [dict(interval=(3, 3)), dict(interval=(-1, 2)), dict(interval=(0, 40)),
                                    dict(min_len=5, max_len=4), dict(noise_scale=0.0), dict(signal_strength=-1.0),
                                    dict(encoder_dim=16), dict(fps=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            sg.SynthTask(**kw)

    def test_defaults(self):
        t = sg.SynthTask()
        assert (t.frame_count, t.patches_per_frame, t.encoder_dim, t.model_dim, t.query_tokens) == (32, 4, 48, 32, 8)
        assert (t.signal_strength, t.noise_scale) == (1.0, 0.5)
        assert t.duration == 16.0 and t.n_tokens == 128

    def test_dict_round_trip(self):
        t = dataclasses.replace(SMALL, interval=(1, 3))
        assert sg.SynthTask.from_dict(t.to_dict()) == t


class TestGenerate:
    def test_deterministic(self):
        a = sg.generate(SMALL, RngState(4))
        b = sg.generate(SMALL, RngState(4))
        assert a.features.tobytes() == b.features.tobytes() and a.queries.tobytes() == b.queries.tobytes()

    def test_shapes_and_ranges(self):
        ds = sg.generate_batch(SMALL, 50, RngState(0))
        assert ds.features.shape == (50, 16, 6) and ds.queries.shape == (50, 3, 4)
        frames = ds.intervals * SMALL.fps
        assert np.all(frames[:, 0] >= 0) and np.all(frames[:, 1] <= 8)
        lengths = frames[:, 1] - frames[:, 0]
        assert np.all((lengths >= 2) & (lengths <= 4))
        assert set(np.unique(ds.saliency)) <= {0, 1, 2, 3, 4}

    def test_noise_free_tokens_are_collinear_with_the_lift(self):
        task = dataclasses.replace(SMALL, noise_scale=1e-300, interval=(2, 5))
        ds = sg.generate_batch(task, 3, RngState(1), sigma=0.0)
        lift = sg.query_lift(6, 4, task.lift_seed)
        for i in range(3):
            u = ds.queries[i, 0]
            inside = ds.features[i, 4:10]
            np.testing.assert_allclose(inside, np.tile(u @ lift, (6, 1)), atol=1e-12)
            assert np.all(ds.features[i, :4] == 0) and np.all(ds.features[i, 10:] == 0)

    def test_signal_free_tokens_are_uncorrelated(self):
        task = dataclasses.replace(SMALL, signal_strength=0.0)
        ds = sg.generate_batch(task, 400, RngState(2))
        lift = sg.query_lift(6, 4, task.lift_seed)
        proj = np.einsum("ntd,nd->nt", ds.features, ds.queries.mean(axis=1) @ lift)
        assert abs(proj.mean()) < 0.02

    def test_interval_tokens_correlate_with_query(self):
        ds = sg.generate_batch(sg.SynthTask(), 200, RngState(3))
        lift = sg.query_lift(48, 32, sg.SynthTask().lift_seed)
        corr_in, corr_out = [], []
        for i in range(200):
            s, e = (ds.intervals[i] * 2).astype(int)
            dots = ds.features[i] @ (ds.queries[i].mean(axis=0) @ lift)
            frame = np.arange(128) // 4
            corr_in.append(dots[(frame >= s) & (frame < e)].mean())
            corr_out.append(dots[(frame < s) | (frame >= e)].mean())
        assert np.mean(corr_in) > 0.5 and abs(np.mean(corr_out)) < 0.05

    def test_lift_has_orthonormal_rows(self):
        lift = sg.query_lift(48, 32, 7)
        np.testing.assert_allclose(lift @ lift.T, np.eye(32), atol=1e-12)


class TestSaliencyProfile:
    @pytest.mark.parametrize("start, end, expected", [
        (2, 5, [0, 0, 1, 4, 1, 0]),
        (0, 1, [4, 0, 0]),
        (1, 5, [0, 1, 4, 4, 1, 0]),
        (0, 7, [1, 2, 3, 4, 3, 2, 1]),
    ])
    def test_levels(self, start, end, expected):
        assert sg.saliency_profile(start, end, len(expected)).tolist() == expected

    @given(st.integers(1, 40).flatmap(lambda T: st.tuples(st.just(T), st.integers(0, T - 1))).flatmap(
        lambda ts: st.tuples(st.just(ts[0]), st.just(ts[1]), st.integers(ts[1] + 1, ts[0]))))
    def test_shape_of_profile(self, args):
        T, s, e = args
        lv = sg.saliency_profile(s, e, T)
        assert np.all(lv[:s] == 0) and np.all(lv[e:] == 0) and np.all(lv[s:e] >= 1)
        assert lv.max() == 4
        np.testing.assert_array_equal(lv[s:e], lv[s:e][::-1])


def test_stream_draws_fresh_reproducible_epochs():
    stream = sg.SynthStream(SMALL, 10, 5, alpha_range=(0.5, 1.5))
    a, b = stream.epoch(0), stream.epoch(1)
    assert len(stream) == 10
    assert a.features.tobytes() != b.features.tobytes()
    assert a.features.tobytes() == stream.epoch(0).features.tobytes()


def test_dump_load_round_trip(tmp_path):
    ds = sg.generate_batch(SMALL, 5, RngState(0))
    sg.dump_dataset(ds, tmp_path / "d.npz")
    back = sg.load_dataset(tmp_path / "d.npz")
    assert back.task == ds.task
    for f in ("features", "queries", "intervals", "saliency"):
        assert getattr(back, f).tobytes() == getattr(ds, f).tobytes()


def test_dump_load_empty(tmp_path):
    ds = sg.generate_batch(SMALL, 0, RngState(0))
    sg.dump_dataset(ds, tmp_path / "e.npz")
    assert len(sg.load_dataset(tmp_path / "e.npz")) == 0


def test_load_without_header(tmp_path):
    np.savez(tmp_path / "x.npz", a=np.zeros(2))
    with pytest.raises(ValidationError, match="header"):
        sg.load_dataset(tmp_path / "x.npz")


class TestProjector:
    def test_identity_projector(self):
        task = dataclasses.replace(SMALL, encoder_dim=4)
        feats = RngState(0).normal((16, 4))
        tb = sg.project_tokens(feats, {"proj.weight": np.eye(4), "proj.bias": np.zeros(4)}, task)
        np.testing.assert_array_equal(tb.embeddings.value, feats)
        assert tb.positions[5].tolist() == [2, 1]

    def test_zero_projector(self):
        tb = sg.project_tokens(np.ones((16, 6)), {"proj.weight": np.zeros((6, 4)), "proj.bias": np.zeros(4)}, SMALL)
        assert np.all(tb.embeddings.value == 0)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            sg.project(np.ones((3, 5)), {"proj.weight": np.zeros((6, 4)), "proj.bias": np.zeros(4)})


def _head_case(seed, use_adapter=False):
    r = RngState(seed)
    params = sg.init_head(SMALL, r.child("h"))
    params["head.readout.weight"] = r.child("w").normal(params["head.readout.weight"].shape)
    params["head.readout.bias"] = r.child("b").normal(3)
    params["head.attn"] = params["head.attn"] + 0.5 * r.child("a").normal((4, 4))
    cfg = vts.VtsConfig(d_model=4, d_r=2, rho=0.5, mode="eval")
    vp = vts.init_params(cfg, r.child("v"))
    data = sg.generate_batch(SMALL, 3, r.child("d"))
    tokens = sg.project_tokens(data.features, params, SMALL)
    sampled, _ = vts.vts_forward(tokens, data.queries, vp, cfg)
    return params, sampled, data


class TestHead:
    def test_intervals_valid_over_many_draws(self):
        r = RngState(0)
        params, sampled, data = _head_case(0)
        for i in range(10_000 // 50):
            p = dict(params)
            p["head.readout.weight"] = 5 * r.child(i).normal(p["head.readout.weight"].shape)
            p["head.readout.bias"] = 5 * r.child(-i - 1).normal(3)
            out = sg.head_forward(sampled, data.queries, p, True, SMALL.duration)
            s, e = out.start.value, out.end.value
            assert np.all(0 <= s) and np.all(s <= e) and np.all(e <= SMALL.duration + 1e-12)

    def test_no_positions_and_identical_tokens_give_flat_saliency(self):
        params, sampled, data = _head_case(1)
        same = dataclasses.replace(sampled, embeddings=nx.const(np.ones(sampled.embeddings.shape)))
        out = sg.head_forward(same, data.queries, params, use_positions=False, duration=SMALL.duration)
        sal = out.saliency_logits.value
        assert np.all(sal == sal[:, :1])

    def test_no_positions_is_permutation_invariant(self):
        params, sampled, data = _head_case(2)
        perm = RngState(5).permutation(sampled.k)
        shuffled = dataclasses.replace(
            sampled, embeddings=nx.const(sampled.embeddings.value[:, perm]), weights=nx.const(sampled.weights.value[:, perm]),
            indices=sampled.indices[:, perm], positions=sampled.positions[:, perm])
        a = sg.head_forward(sampled, data.queries, params, False, SMALL.duration)
        b = sg.head_forward(shuffled, data.queries, params, False, SMALL.duration)
        np.testing.assert_allclose(a.start.value, b.start.value, atol=1e-12)
        np.testing.assert_allclose(a.saliency_logits.value, b.saliency_logits.value, atol=1e-12)

    def test_uniform_attention_over_an_interval_recovers_it(self):
        # a zero readout reads the moment-matched interval directly
        task = sg.SynthTask(frame_count=10, patches_per_frame=1, encoder_dim=4, model_dim=4, query_tokens=1)
        params = sg.init_head(task, RngState(0))
        params["head.readout.weight"] = np.zeros_like(params["head.readout.weight"])
        idx = np.arange(3, 7)
        sampled = vts.SampledTokens(nx.const(np.ones((4, 4)) / 4), nx.const(np.full(4, 0.25)), idx,
                                    np.stack([idx, np.zeros(4, int)], 1), 10, 1)
        out = sg.head_forward(sampled, np.ones((1, 4)), params, True, 5.0)
        assert out.start.value == pytest.approx(1.5, abs=1e-9) and out.end.value == pytest.approx(3.5, abs=1e-9)

    def test_adapter_gradient_through_head(self):
        params, sampled, data = _head_case(3)
        params = tr.low_rank_adapter_update(params, 2, RngState(1), init_scale=0.3)
        params["adapter.readout.b"] = RngState(2).normal(params["adapter.readout.b"].shape)
        params["adapter.attn.b"] = 0.3 * RngState(3).normal(params["adapter.attn.b"].shape)
        frozen = nx.const(sampled.embeddings.value)
        sampled = dataclasses.replace(sampled, embeddings=frozen, weights=nx.const(sampled.weights.value))

        def loss(p):
            out = sg.head_forward(sampled, data.queries, p, True, SMALL.duration)
            return sg.grounding_loss(out.start, out.end, data.intervals, out.saliency_logits, data.saliency, SMALL.duration)

        for key in sg.ADAPTER_KEYS + sg.HEAD_BASE_KEYS:
            leaves = dict(params)
            leaves[key] = nx.param(params[key])
            nx.backward(loss(leaves))
            fd = nx.fd_gradient(lambda x: float(loss({**params, key: x}).value), params[key], 1e-6)
            assert nx.rel_error(leaves[key].grad, fd) < 1e-4, key


class TestLoss:
    def test_boundary_term_formula(self):
        loss = sg.grounding_loss(nx.const(np.array([4.0])), nx.const(np.array([10.0])), np.array([[6.0, 12.0]]),
                                 None, None, 30.0, saliency_weight=0.0)
        assert loss.value == pytest.approx((2 + 2) / 30 / 2)

    def test_perfect_prediction_hits_the_entropy_floor(self):
        target = np.array([[0, 1, 4, 1, 0]])
        p = target / target.sum()
        logits = np.log(np.where(p > 0, p, 1e-300))
        loss = sg.grounding_loss(nx.const(np.array([1.0])), nx.const(np.array([3.0])), np.array([[1.0, 3.0]]),
                                 nx.const(logits), target, 5.0, saliency_weight=1.0)
        entropy = -np.sum(p[p > 0] * np.log(p[p > 0]))
        assert loss.value == pytest.approx(entropy, abs=1e-9)

    def test_one_hot_floor_is_zero(self):
        loss = sg.grounding_loss(nx.const(np.array([1.0])), nx.const(np.array([2.0])), np.array([[1.0, 2.0]]),
                                 nx.const(np.array([[0.0, 800.0, 0.0]])), np.array([[0, 4, 0]]), 3.0, 1.0)
        assert loss.value == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=50)
    @given(st.integers(0, 10_000))
    def test_nonnegative(self, seed):
        r = RngState(seed)
        data = sg.generate_batch(SMALL, 4, r)
        s = r.uniform(4, 0, 4)
        loss = sg.grounding_loss(nx.const(s), nx.const(s + r.uniform(4, 0, 4)), data.intervals,
                                 nx.const(r.normal((4, 8))), data.saliency, SMALL.duration, 0.7)
        assert loss.value >= 0
