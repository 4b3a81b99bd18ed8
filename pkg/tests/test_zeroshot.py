import numpy as np
import pytest

from maskfill.engine import ContractViolation, NumericError, Tensor
from maskfill.model import Hourglass, HourglassConfig
from maskfill.zeroshot import (AverageEnsemble, DenoiseConfig, EmaEnsemble,
                               LastEnsemble, crop_pad, denoise, direct_ensemble,
                               ema_update, iterative_fill, pad_to_multiple,
                               pd_down, pd_up)


def tiny_model(seed=0, channels=3):
    cfg = HourglassConfig(in_channels=channels, depth=1, base_channels=4, max_channels=8)
    return Hourglass(cfg, np.random.default_rng(seed))


def tiny_cfg(**kw):
    base = dict(mask_ratio=0.4, beta=0.8, iters=20, lr=1e-3,
                model=HourglassConfig(in_channels=3, depth=1, base_channels=4,
                                      max_channels=8), seed=0)
    base.update(kw)
    return DenoiseConfig(**base)


class TestPixelShuffle:
    def test_factor_one_identity(self, rng):
        x = rng.random((1, 3, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(pd_down(x, 1), x)
        np.testing.assert_array_equal(pd_up(x, 1), x)

    def test_four_by_four_example(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        stack = pd_down(x, 2)
        np.testing.assert_array_equal(stack[0, 0], [[0, 2], [8, 10]])
        np.testing.assert_array_equal(stack[1, 0], [[1, 3], [9, 11]])
        np.testing.assert_array_equal(stack[2, 0], [[4, 6], [12, 14]])
        np.testing.assert_array_equal(stack[3, 0], [[5, 7], [13, 15]])
        np.testing.assert_array_equal(pd_up(stack, 2), x)

    def test_shape_contract(self, rng):
        x = rng.random((1, 3, 64, 64)).astype(np.float32)
        assert pd_down(x, 2).shape == (4, 3, 32, 32)

    @pytest.mark.parametrize("d", [1, 2, 3, 4])
    def test_round_trip_bit_exact(self, d, rng):
        x = rng.random((1, 3, 12, 24)).astype(np.float32)
        np.testing.assert_array_equal(pd_up(pd_down(x, d), d), x)

    @pytest.mark.parametrize("d", [2, 3, 4])
    def test_round_trip_with_pad_and_crop(self, d, rng):
        x = rng.random((1, 3, 13, 18)).astype(np.float32)
        padded, pads = pad_to_multiple(x, d)
        assert padded.shape[2] % d == 0 and padded.shape[3] % d == 0
        back = crop_pad(pd_up(pd_down(padded, d), d), pads)
        np.testing.assert_array_equal(back, x)

    def test_single_pixel_subimages(self, rng):
        x = rng.random((1, 2, 3, 3)).astype(np.float32)
        stack = pd_down(x, 3)
        assert stack.shape == (9, 2, 1, 1)
        np.testing.assert_array_equal(pd_up(stack, 3), x)

    def test_wrong_batch_count_rejected(self, rng):
        with pytest.raises(ContractViolation):
            pd_up(rng.random((3, 1, 2, 2)).astype(np.float32), 2)

    def test_indivisible_rejected(self, rng):
        with pytest.raises(ContractViolation):
            pd_down(rng.random((1, 1, 5, 4)).astype(np.float32), 2)


class TestEmaUpdate:
    def test_all_visible_leaves_ensemble(self, rng):
        ybar = rng.random((1, 1, 4, 4)).astype(np.float32)
        y = rng.random((1, 1, 4, 4)).astype(np.float32)
        out = ema_update(ybar, y, np.ones_like(ybar), 0.9)
        np.testing.assert_array_equal(out, ybar)

    def test_single_hidden_pixel_value(self):
        ybar = np.full((1, 1, 2, 2), 0.5, dtype=np.float32)
        y = np.full((1, 1, 2, 2), 1.0, dtype=np.float32)
        mask = np.ones_like(ybar)
        mask[0, 0, 1, 0] = 0.0
        out = ema_update(ybar, y, mask, 0.9)
        assert out[0, 0, 1, 0] == pytest.approx(0.55, rel=1e-6)
        assert out[0, 0, 0, 0] == 0.5

    def test_beta_one_degenerate_limit(self, rng):
        ybar = rng.random((1, 1, 3, 3)).astype(np.float32)
        y = rng.random((1, 1, 3, 3)).astype(np.float32)
        out = ema_update(ybar, y, np.zeros_like(ybar), 1.0)
        np.testing.assert_allclose(out, ybar, atol=1e-7)

    def test_counter_tracks_hidden_updates(self, rng):
        ens = EmaEnsemble(rng.random((1, 1, 4, 4)).astype(np.float32), 0.9)
        mask = np.ones((1, 1, 4, 4), dtype=np.float32)
        mask[0, 0, 0, 0] = 0.0
        ens.update(rng.random((1, 1, 4, 4)).astype(np.float32), mask)
        assert ens.counter[0, 0, 0, 0] == 1
        assert ens.counter.sum() == 1


def replay_reference(records, x0, mode, beta=0.8, start=0):
    """Independent re-aggregation of recorded (prediction, mask) pairs."""
    ybar = x0.astype(np.float64).copy()
    total = np.zeros_like(ybar)
    count = np.zeros_like(ybar)
    last = x0.astype(np.float64).copy()
    for t, (y, m) in enumerate(records, start=1):
        hidden = m == 0
        if mode == "ema":
            ybar = np.where(hidden, beta * ybar + (1 - beta) * y, ybar)
        elif mode in ("average", "avg_after"):
            if mode == "average" or t >= start:
                total = np.where(hidden, total + y, total)
                count = np.where(hidden, count + 1, count)
        elif mode == "last":
            last = np.where(hidden, y, last)
    if mode == "ema":
        return ybar
    if mode == "last":
        return last
    return np.where(count > 0, total / np.maximum(count, 1), x0)


class TestIterativeFill:
    def test_single_iteration_closed_form(self, rng):
        x = rng.random((1, 3, 16, 16)).astype(np.float32)
        cfg = tiny_cfg(iters=1, beta=0.8)
        records = []
        model = Hourglass(cfg.model, np.random.default_rng(2))
        result = iterative_fill(model, x, cfg, np.random.default_rng(9), record=records)
        y1, m1 = records[0]
        hidden = m1 == 0
        expect = np.where(hidden, 0.8 * x + 0.2 * y1, x)
        np.testing.assert_allclose(result.output, expect, atol=1e-6)

    @pytest.mark.parametrize("mode,start", [("ema", 0), ("average", 0),
                                            ("last", 0), ("avg_after", 8)])
    def test_replay_oracle(self, mode, start, rng):
        x = rng.random((1, 3, 16, 16)).astype(np.float32)
        cfg = tiny_cfg(iters=25, ensemble_mode=mode, avg_after_start=start)
        records = []
        model = Hourglass(cfg.model, np.random.default_rng(4))
        result = iterative_fill(model, x, cfg, np.random.default_rng(5), record=records)
        expect = replay_reference(records, x, mode, beta=cfg.beta, start=start)
        assert np.max(np.abs(result.output - expect)) < 1e-6

    def test_never_hidden_pixels_stay_at_input(self, rng):
        x = rng.random((1, 3, 16, 16)).astype(np.float32)
        cfg = tiny_cfg(iters=3, mask_ratio=0.05)
        model = Hourglass(cfg.model, np.random.default_rng(0))
        records = []
        result = iterative_fill(model, x, cfg, np.random.default_rng(1), record=records)
        touched = np.zeros_like(x, dtype=bool)
        for _, m in records:
            touched |= m == 0
        assert result.never_hidden == int((~touched).sum())
        assert result.never_hidden > 0
        np.testing.assert_array_equal(result.output[~touched], x[~touched])

    def test_deterministic_given_seed(self, rng):
        x = rng.random((1, 3, 16, 16)).astype(np.float32)

        def run():
            cfg = tiny_cfg(iters=10)
            model = Hourglass(cfg.model, np.random.default_rng(3))
            return iterative_fill(model, x, cfg, np.random.default_rng(8)).output

        np.testing.assert_array_equal(run(), run())

    def test_zero_iterations_rejected(self, rng):
        x = rng.random((1, 3, 16, 16)).astype(np.float32)
        cfg = tiny_cfg()
        cfg.iters = 0
        model = Hourglass(cfg.model, np.random.default_rng(0))
        with pytest.raises(ContractViolation):
            iterative_fill(model, x, cfg, np.random.default_rng(0))

    def test_nan_input_aborts_with_diagnostic(self, rng):
        x = rng.random((1, 3, 16, 16)).astype(np.float32)
        x[0, 0, 3, 3] = np.nan
        cfg = tiny_cfg(iters=5)
        model = Hourglass(cfg.model, np.random.default_rng(0))
        with pytest.raises(NumericError, match="iteration"):
            iterative_fill(model, x, cfg, np.random.default_rng(0))

    def test_plateau_stop_halts_early(self, rng):
        # mask_ratio 0 makes every loss exactly 0, an immediate plateau
        x = rng.random((1, 3, 16, 16)).astype(np.float32)
        cfg = tiny_cfg(iters=50, mask_ratio=0.0, plateau_window=4)
        model = Hourglass(cfg.model, np.random.default_rng(0))
        result = iterative_fill(model, x, cfg, np.random.default_rng(0))
        assert result.iterations_run == 8

    def test_every_pixel_hidden_at_least_once_for_t100(self, rng):
        # chance of an untouched pixel at p=0.3, T=100 is 0.7^100 ~ 3e-16
        x = rng.random((1, 3, 12, 12)).astype(np.float32)
        cfg = tiny_cfg(iters=100, mask_ratio=0.3)
        model = Hourglass(cfg.model, np.random.default_rng(0))
        result = iterative_fill(model, x, cfg, np.random.default_rng(0))
        assert result.never_hidden == 0

    def test_trace_psnr_column_with_reference(self, rng):
        x = rng.random((1, 3, 16, 16)).astype(np.float32)
        cfg = tiny_cfg(iters=4)
        model = Hourglass(cfg.model, np.random.default_rng(0))
        result = iterative_fill(model, x, cfg, np.random.default_rng(0), reference=x)
        assert all("psnr" in row for row in result.trace)
        assert [row["t"] for row in result.trace] == [1, 2, 3, 4]


class _OracleModel:
    """Stand-in model that always reproduces one fixed image."""

    def __init__(self, img):
        self.img = img

    def forward(self, x):
        return Tensor(self.img)

    __call__ = forward


class TestDirectEnsemble:
    def test_single_pass_composition(self, rng):
        from maskfill.masking import MaskSpec, sample_mask
        x = rng.random((1, 3, 16, 16)).astype(np.float32)
        model = tiny_model()
        out = direct_ensemble(model, x, p=0.4, passes=1, rng=np.random.default_rng(6))
        mask = sample_mask(x.shape, MaskSpec(0.4), np.random.default_rng(6))
        pred = model(Tensor(mask * x)).data
        hidden = mask == 0
        np.testing.assert_allclose(out[hidden], pred[hidden], atol=1e-6)
        np.testing.assert_array_equal(out[~hidden], x[~hidden])

    def test_perfect_predictor_is_fixed_point(self, rng):
        # a model that always outputs x: every hidden-site prediction equals x,
        # never-hidden pixels fall back to x, so the ensemble returns x exactly
        x = rng.random((1, 3, 8, 8)).astype(np.float32)
        out = direct_ensemble(_OracleModel(x), x, p=0.5, passes=16,
                              rng=np.random.default_rng(0))
        np.testing.assert_array_equal(out, x)

    def test_zero_passes_rejected(self, rng):
        with pytest.raises(ContractViolation):
            direct_ensemble(tiny_model(), rng.random((1, 3, 8, 8)).astype(np.float32),
                            0.3, 0, np.random.default_rng(0))

    def test_no_parameter_updates(self, rng):
        model = tiny_model()
        before = {n: t.data.copy() for n, t in model.params.items()}
        direct_ensemble(model, rng.random((1, 3, 16, 16)).astype(np.float32),
                        0.3, 4, np.random.default_rng(0))
        for n, t in model.params.items():
            np.testing.assert_array_equal(t.data, before[n])


class TestDenoise:
    def test_d1_path_equals_iterative_fill(self, rng):
        x = rng.random((1, 3, 16, 16)).astype(np.float32)
        cfg = tiny_cfg(iters=6, seed=42)
        result = denoise(cfg, x)

        manual_rng = np.random.default_rng(42)
        init_rng = np.random.default_rng(manual_rng.integers(2 ** 63))
        model = Hourglass(cfg.model, init_rng)
        manual = iterative_fill(model, x, cfg, manual_rng)
        np.testing.assert_array_equal(result.output, manual.output)

    @pytest.mark.parametrize("hw", [(16, 16), (15, 17)])
    def test_pd_path_preserves_shape(self, hw, rng):
        x = rng.random((1, 3) + hw).astype(np.float32)
        cfg = tiny_cfg(iters=4, pd_factor=2, seed=1)
        result = denoise(cfg, x)
        assert result.output.shape == x.shape

    def test_pd_path_matches_manual_composition(self, rng):
        x = rng.random((1, 3, 16, 16)).astype(np.float32)
        cfg = tiny_cfg(iters=5, pd_factor=2, seed=7)
        result = denoise(cfg, x)

        manual_rng = np.random.default_rng(7)
        init_rng = np.random.default_rng(manual_rng.integers(2 ** 63))
        model = Hourglass(cfg.model, init_rng)
        padded, pads = pad_to_multiple(x, 2)
        stack = pd_down(padded, 2)
        inner = iterative_fill(model, stack, cfg, manual_rng)
        expect = crop_pad(pd_up(inner.output, 2), pads)
        np.testing.assert_array_equal(result.output, expect)

    def test_weights_channel_mismatch_rejected(self, rng):
        x = rng.random((1, 1, 16, 16)).astype(np.float32)
        cfg = tiny_cfg(iters=2)   # model config says 3 channels
        with pytest.raises(ContractViolation):
            denoise(cfg, x)

    def test_non_batched_input_rejected(self, rng):
        cfg = tiny_cfg()
        with pytest.raises(ContractViolation):
            denoise(cfg, rng.random((3, 16, 16)).astype(np.float32))

    def test_bad_ensemble_mode_rejected(self):
        with pytest.raises(ContractViolation):
            DenoiseConfig(ensemble_mode="median")

    def test_ema_beta_bounds_enforced(self):
        with pytest.raises(ContractViolation):
            DenoiseConfig(ensemble_mode="ema", beta=1.0)


class TestEnsembleClasses:
    def test_average_fallback_to_init(self, rng):
        init = rng.random((1, 1, 2, 2)).astype(np.float32)
        ens = AverageEnsemble(init)
        mask = np.ones_like(init)
        ens.update(np.zeros_like(init), mask)   # nothing hidden
        np.testing.assert_array_equal(ens.value(), init)

    def test_average_uniform_mean(self, rng):
        init = np.zeros((1, 1, 1, 1), dtype=np.float32)
        ens = AverageEnsemble(init)
        mask = np.zeros_like(init)
        for v in (1.0, 2.0, 6.0):
            ens.update(np.full_like(init, v), mask)
        assert ens.value()[0, 0, 0, 0] == pytest.approx(3.0)

    def test_last_keeps_latest_hidden(self):
        init = np.zeros((1, 1, 1, 2), dtype=np.float32)
        ens = LastEnsemble(init)
        m_first = np.array([[[[0.0, 1.0]]]], dtype=np.float32)
        m_second = np.array([[[[1.0, 1.0]]]], dtype=np.float32)
        ens.update(np.full_like(init, 5.0), m_first)
        ens.update(np.full_like(init, 9.0), m_second)
        np.testing.assert_array_equal(ens.value(), [[[[5.0, 0.0]]]])
