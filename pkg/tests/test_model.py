from collections import OrderedDict

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualppg import model as m
from dualppg.ingest import FrameSequence
from dualppg.signalcore import SignalLengthError, Waveform, estimate_hr, first_difference, standardize
from dualppg.synth import gen_bvp, gen_face_clip

from .oracles import direct_dft_power

FS = 30.0
TINY = m.ModelConfig(input_size=8, frame_depth=10, shift_fraction=0.5, conv_filters=(2, 2), dense_width=4)


def random_clip(cfg, n_frames, seed=0):
    rng = np.random.default_rng(seed)
    s = cfg.input_size
    return m.PreprocessedClip(
        rng.standard_normal((n_frames, s, s, 3)).astype(np.float32),
        rng.standard_normal((n_frames, s, s, 3)).astype(np.float32),
        FS,
    )


# -- config and params ------------------------------------------------------


def test_config_invariants():
    for bad in (dict(frame_depth=1), dict(shift_fraction=0.0), dict(shift_fraction=0.6), dict(input_size=7)):
        with pytest.raises(m.ConfigError):
            m.ModelConfig(**bad)
    with pytest.raises(m.ConfigError):
        m.ModelConfig.from_json({"input_size": 36, "width": 3})
    cfg = m.ModelConfig(conv_filters=[4, 8])
    assert m.ModelConfig.from_json(cfg.to_json()) == cfg


def test_default_config_shapes():
    shapes = m.ModelConfig().param_shapes()
    assert shapes["motion.conv1.weight"] == (32, 3, 3, 3)
    assert shapes["appearance.conv4.weight"] == (64, 64, 3, 3)
    # ceil-mode pooling: 36 -> conv 34 -> pool 17 -> conv 15 -> pool 8
    assert shapes["dense1.weight"] == (128, 64 * 8 * 8)
    p = m.init_params(m.ModelConfig(), seed=0)
    assert p.all_finite() and p.numel() == sum(int(np.prod(s)) for s in shapes.values())


def test_init_is_seeded():
    a, b = m.init_params(TINY, 3), m.init_params(TINY, 3)
    assert a.equal(b) and not a.equal(m.init_params(TINY, 4))


# -- preprocessing ----------------------------------------------------------


def test_static_clip_has_zero_motion():
    frames = np.full((21, 12, 12, 3), 90, np.uint8)
    clip = m.preprocess_clip(FrameSequence(frames, np.arange(21) / FS), TINY)
    assert len(clip) == 20
    assert np.all(clip.motion == 0)
    assert np.all(clip.appearance == 0)


def test_difference_ratio_formula():
    small = np.empty((11, 8, 8, 3), np.float32)
    small[0::2] = 100.0
    small[1::2] = 102.0
    # check the raw ratio by bypassing standardization
    c = small.astype(np.float64)
    ratio = (c[1:] - c[:-1]) / (c[1:] + c[:-1] + TINY.eps)
    assert np.allclose(np.abs(ratio), 2 / 202, atol=1e-9)
    clip = m.preprocess_frames(small, FS, TINY)
    assert np.allclose(clip.motion, standardize(ratio[:10]).astype(np.float32))
    assert np.allclose(np.abs(clip.motion), 1.0, atol=1e-5)


def test_length_rules():
    with pytest.raises(SignalLengthError):
        m.preprocess_frames(np.ones((10, 8, 8, 3)), FS, TINY)
    assert len(m.preprocess_frames(np.random.default_rng(0).random((35, 8, 8, 3)), FS, TINY)) == 30


def test_area_downscale_preserves_mean():
    f = np.random.default_rng(0).integers(0, 256, (3, 72, 72, 3), dtype=np.uint8)
    small = m.downscale_frames(f, 16)
    assert small.shape == (3, 16, 16, 3)
    assert np.allclose(small.mean(axis=(1, 2)), f.mean(axis=(1, 2)), rtol=1e-5)


def test_pulsing_clip_motion_peaks_at_pulse():
    bvp = gen_bvp(84, FS, 20, jitter_bpm=0, seed=0)
    clip = m.preprocess_clip(gen_face_clip(bvp, noise_sigma=0.5, seed=1, size=24), m.ModelConfig(input_size=12))
    trace = clip.motion.mean(axis=(1, 2, 3)).astype(np.float64)
    freqs = np.arange(0.75, 3.0, 0.01)
    assert freqs[np.argmax(direct_dft_power(trace, FS, freqs))] == pytest.approx(1.4, abs=0.05)


# -- temporal shift ---------------------------------------------------------


def test_shift_example():
    x = np.arange(2 * 3 * 8, dtype=float).reshape(2, 1, 3, 8) + 1
    y = m.temporal_shift(x, 2, 0.25)
    assert np.array_equal(y[1, ..., :2], x[0, ..., :2])
    assert np.all(y[0, ..., :2] == 0)
    assert np.array_equal(y[0, ..., 2:4], x[1, ..., 2:4])
    assert np.all(y[1, ..., 2:4] == 0)
    assert np.array_equal(y[..., 4:], x[..., 4:])


def test_shift_identity_when_no_channels_move():
    x = np.random.default_rng(0).standard_normal((4, 2, 2, 3))
    assert np.array_equal(m.temporal_shift(x, 2, 0.25), x)


def test_shift_no_group_leakage_and_torch_parity():
    x = np.random.default_rng(1).standard_normal((20, 2, 2, 8))
    y = m.temporal_shift(x, 10, 0.25)
    assert np.all(y[[0, 10], ..., :2] == 0)
    assert np.all(y[[9, 19], ..., 2:4] == 0)
    t = m.temporal_shift(torch.from_numpy(x.transpose(0, 3, 1, 2)), 10, 0.25, channel_axis=1)
    assert np.array_equal(t.numpy().transpose(0, 2, 3, 1), y)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), depth=st.integers(2, 6), groups=st.integers(1, 4), c=st.integers(2, 16))
def test_shift_is_permutation_with_zero_fill(seed, depth, groups, c):
    x = np.random.default_rng(seed).uniform(1, 2, (depth * groups, 2, 2, c))
    frac = 0.25
    fold = int(np.floor(c * frac + 1e-9))
    y = m.temporal_shift(x, depth, frac)
    g = x.reshape(groups, depth, 2, 2, c)
    # untouched block sums preserved exactly
    assert np.sum(y[..., 2 * fold :]) == np.sum(x[..., 2 * fold :])
    fwd = np.sort(y[..., :fold][y[..., :fold] != 0])
    assert np.array_equal(fwd, np.sort(g[:, :-1, ..., :fold].ravel()))
    bwd = np.sort(y[..., fold : 2 * fold][y[..., fold : 2 * fold] != 0])
    assert np.array_equal(bwd, np.sort(g[:, 1:, ..., fold : 2 * fold].ravel()))


# -- attention mask ---------------------------------------------------------


def test_mask_uniform_features():
    mask = m.attention_mask(np.ones((3, 5, 5, 4)), np.array([0.3, -0.1, 0.2, 0.5]))
    assert mask.shape == (3, 5, 5, 1)
    assert np.allclose(mask, 0.5)


def test_mask_hot_region():
    f = np.zeros((2, 6, 6, 1))
    f[:, 2, 3, 0] = 5.0
    mask = m.attention_mask(f, [1.0])
    assert mask[0, 2, 3, 0] == mask[0].max() and mask[0, 2, 3, 0] > 0.5
    assert np.allclose(mask.mean(axis=(1, 2, 3)), 0.5, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), c=st.integers(1, 6), s=st.integers(1, 9))
def test_mask_nonnegative_half_mean(seed, c, s):
    rng = np.random.default_rng(seed)
    mask = m.attention_mask(rng.standard_normal((3, s, s, c)) * 5, rng.standard_normal(c), rng.standard_normal())
    assert np.all(mask >= 0)
    assert np.allclose(mask.mean(axis=(1, 2, 3)), 0.5, atol=1e-6)


# -- forward, loss, grad ----------------------------------------------------


def zero_head(p):
    t = OrderedDict(p.items())
    t["dense2.weight"] = torch.zeros_like(t["dense2.weight"])
    t["dense2.bias"] = torch.zeros_like(t["dense2.bias"])
    return m.NetworkParams(p.config, t)


def test_zero_head_gives_zero_output():
    out = m.forward(zero_head(m.init_params(TINY, 0)), random_clip(TINY, 20))
    assert len(out) == 20 and np.all(out.samples == 0)


def test_forward_is_deterministic_and_finite():
    p, clip = m.init_params(TINY, 1), random_clip(TINY, 30, 2)
    a, b = m.forward(p, clip), m.forward(p.clone(), clip)
    assert a == b and np.all(np.isfinite(a.samples))


def test_forward_rejects_mismatched_clip():
    with pytest.raises(m.ConfigError):
        m.forward(m.init_params(TINY, 0), random_clip(m.ModelConfig(input_size=10), 20))
    with pytest.raises(m.ConfigError):
        m.forward(m.init_params(TINY, 0), random_clip(TINY, 15))


def test_forward_ignores_appearance_brightness_offset():
    cfg = m.ModelConfig(input_size=8, conv_filters=(2, 4), dense_width=4)
    rng = np.random.default_rng(0)
    small = rng.uniform(50, 150, (21, 8, 8, 3))
    p = m.init_params(cfg, 0, torch.float64)
    a = m.forward(p, m.preprocess_frames(small, FS, cfg))
    # a global brightness offset changes the motion ratios, so compare appearance only
    clip = m.preprocess_frames(small, FS, cfg)
    shifted = m.preprocess_frames(small + 40.0, FS, cfg)
    mixed = m.PreprocessedClip(clip.motion, shifted.appearance, FS)
    assert np.allclose(m.forward(p, mixed).samples, a.samples, atol=1e-5)


def test_loss_examples():
    label = gen_bvp(70, FS, 5, seed=0)
    target = m.prepare_label(label, 100)
    assert m.loss(target, label) == pytest.approx(0.0, abs=1e-24)
    assert m.loss(target + 0.3, label) == pytest.approx(0.09, rel=1e-12)
    rng = np.random.default_rng(4)
    pred = rng.standard_normal(100)
    d = np.diff(label.samples)[:100]
    ref = np.mean((pred - (d - d.mean()) / d.std()) ** 2)
    assert abs(m.loss(pred, label) - ref) <= 1e-12
    with pytest.raises(m.AlignmentError):
        m.loss(np.zeros(200), Waveform(label.samples[:50], FS))


def test_prepare_label_is_standardized_difference():
    label = gen_bvp(70, FS, 5, seed=0)
    t = m.prepare_label(label, 120)
    assert np.allclose(t, standardize(first_difference(label).samples[:120]))
    assert abs(t.mean()) < 1e-12 and t.std() == pytest.approx(1.0)


def test_grad_zero_at_stationary_point():
    p = zero_head(m.init_params(TINY, 0, torch.float64))
    clip = random_clip(TINY, 10)
    # constant label prepares to an all-zero target, equal to the zero-head output
    g = m.grad(p, clip, Waveform(np.zeros(11), FS))
    assert all(torch.all(v == 0) for _, v in g.items())


def finite_difference(p, example, h=1e-4):
    cfg = p.config
    clip_t, target = example.tensors(torch.float64)
    out = OrderedDict()
    for name, t in p.items():
        fd = torch.zeros_like(t)
        flat = fd.view(-1)
        for i in range(t.numel()):
            plus = OrderedDict(p.items())
            minus = OrderedDict(p.items())
            e = torch.zeros(t.numel(), dtype=t.dtype)
            e[i] = h
            plus[name] = t + e.view(t.shape)
            minus[name] = t - e.view(t.shape)
            flat[i] = (m.loss_tensor(plus, clip_t, target, cfg) - m.loss_tensor(minus, clip_t, target, cfg)) / (2 * h)
        out[name] = fd
    return out


def max_relative_error(g, fd):
    worst = 0.0
    for name in g:
        a, b = g[name], fd[name]
        denom = torch.clamp(torch.maximum(a.abs(), b.abs()), min=1e-8)
        worst = max(worst, float(torch.max((a - b).abs() / denom)))
    return worst


def tiny_example(seed=0):
    clip = random_clip(TINY, 10, seed)
    label = Waveform(np.random.default_rng(seed + 100).standard_normal(11), FS)
    return m.Example(clip, label)


def test_grad_matches_finite_differences():
    p = m.init_params(TINY, 5, torch.float64)
    ex = tiny_example(5)
    g = m.grad(p, ex.clip, ex.label)
    assert max_relative_error(OrderedDict(g.items()), finite_difference(p, ex)) <= 1e-4


def test_grad_is_deterministic():
    p = m.init_params(TINY, 2)
    ex = tiny_example(2)
    a = m.grad(p, ex.clip, ex.label)
    b = m.grad(p, ex.clip, ex.label)
    assert a.equal(b)


# -- checkpoints ------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    p = m.init_params(m.ModelConfig(input_size=12, conv_filters=(3, 5), dense_width=7), 9)
    m.save_checkpoint(p, tmp_path / "ck")
    q = m.load_checkpoint(tmp_path / "ck")
    assert q.equal(p)
    first = (tmp_path / "ck" / "params.bin").read_bytes()
    m.save_checkpoint(q, tmp_path / "ck2")
    assert (tmp_path / "ck2" / "params.bin").read_bytes() == first
    assert len(first) == 4 * p.numel()


def test_checkpoint_missing_file(tmp_path):
    m.save_checkpoint(m.init_params(TINY, 0), tmp_path / "ck")
    (tmp_path / "ck" / "layout.json").unlink()
    with pytest.raises(m.ConfigError, match="layout.json"):
        m.load_checkpoint(tmp_path / "ck")


def test_pretrained_recovers_hr_in_distribution():
    from dualppg.meta import TrialView, segment_examples, train_supervised
    from dualppg.synth import gen_task_suite

    cfg = m.ModelConfig(input_size=16, conv_filters=(4, 8), dense_width=16)
    ds, trials = gen_task_suite(3, ("led",), seed=11, dur_s=40.0)
    views = [TrialView(t, cfg.input_size) for t in trials]
    ex = [e for v in views[:2] for e in segment_examples(v, cfg, 20.0, "gold")]
    theta, curve = train_supervised(m.init_params(cfg, 0), ex, 6)
    assert curve[-1] < curve[0]
    held = views[2]
    out = m.forward(theta, m.preprocess_frames(held.small, held.fs, cfg))
    from dualppg.signalcore import cumulative_sum

    true_hr = ds.true_hr[ds.keys()[2]]
    assert estimate_hr(cumulative_sum(out)) == pytest.approx(true_hr, abs=3.0)
