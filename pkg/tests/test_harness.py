import numpy as np
import pytest

from conftest import outlier_model, toy_config, toy_model
from ssm_ptq.errors import ConfigError, DataError
from ssm_ptq.harness import (
    QuantConfig,
    build_hooks,
    evaluate_fidelity,
    generate_tokens,
    infer_quant_config,
    load_eval_model,
    load_tokens,
    make_outlier_model,
    prepare,
    quantize_model_weights,
    run_grid,
    save_quantized_model,
    save_tokens,
    scoped_weight_names,
    split_corpus,
)
from ssm_ptq.model import QUANTIZABLE_TAPS, TapPoint, model_forward, model_tensors
from ssm_ptq.stats import calibrate_model, detect_outliers


def _corpus(model, seed=0, n_tokens=1024, seq_len=32):
    return split_corpus(generate_tokens(n_tokens, model.config.vocab_size, seed), seq_len)


class TestQuantConfig:
    @pytest.mark.parametrize(
        "notation,wbits,abits",
        [("W8", 8, None), ("W4", 4, None), ("W8A8", 8, 8), ("fp", None, None), ("baseline", None, None)],
    )
    def test_notation_round_trip(self, notation, wbits, abits):
        cfg = QuantConfig.from_notation(notation)
        assert cfg.wbits == wbits and cfg.abits == abits
        if notation not in ("baseline",):
            assert cfg.notation == ("fp" if wbits is None else notation)

    def test_abits_requires_wbits(self):
        with pytest.raises(ConfigError):
            QuantConfig(wbits=None, abits=8)

    def test_bad_notation(self):
        with pytest.raises(ConfigError):
            QuantConfig.from_notation("W16")

    def test_dict_round_trip(self):
        cfg = QuantConfig(wbits=8, abits=8, scope="all", smooth_alpha=0.5, sigma_mult=5.0)
        assert QuantConfig.from_dict(cfg.to_dict()) == cfg


class TestCorpus:
    def test_split_disjoint_halves(self):
        ids = np.arange(100, dtype="<u4")
        corpus = split_corpus(ids, 10)
        assert len(corpus.calibration) == 5 and len(corpus.evaluation) == 5
        cal = np.concatenate(corpus.calibration)
        ev = np.concatenate(corpus.evaluation)
        assert set(cal.tolist()).isdisjoint(set(ev.tolist()))

    def test_too_small_corpus(self):
        with pytest.raises(DataError):
            split_corpus(np.arange(10), 10)

    def test_token_file_round_trip(self, tmp_path):
        ids = generate_tokens(64, 100, 3)
        save_tokens(ids, tmp_path / "t.bin")
        assert (tmp_path / "t.bin").stat().st_size == 64 * 4
        back = load_tokens(tmp_path / "t.bin")
        assert np.array_equal(back, ids)

    def test_generate_deterministic(self):
        assert np.array_equal(generate_tokens(32, 50, 9), generate_tokens(32, 50, 9))


class TestBuildHooks:
    def test_fp_config_is_identity(self):
        model = toy_model(seed=1)
        model2, hooks = build_hooks(QuantConfig(), model)
        assert len(hooks) == 0
        ids = np.arange(8) % model.config.vocab_size
        assert np.array_equal(model_forward(model2, ids), model_forward(model, ids))

    def test_w8a8_mlp_accounting(self):
        model = toy_model(seed=2)
        corpus = _corpus(model)
        stats = calibrate_model(model, corpus.calibration)
        p = prepare(QuantConfig(wbits=8, abits=8, scope="mlp"), model, stats)
        # exactly 4 weight tensors per layer quantized
        assert len(p.quantized) == 4 * model.config.n_layers
        per_layer_names = {n.rsplit(".", 1)[-1] for n in p.quantized}
        assert "weight" in per_layer_names  # dt_proj.weight
        # 4 activation taps hooked per layer, SSM_OUT untouched
        hooked = {key for key, _ in p.hooks.items()}
        assert hooked == {(l, t) for l in range(model.config.n_layers) for t in QUANTIZABLE_TAPS}

    def test_scope_all_adds_non_projection_tensors(self):
        config = toy_config()
        mlp = set(scoped_weight_names(config, "mlp"))
        allx = set(scoped_weight_names(config, "all"))
        extra = allx - mlp
        assert extra == {
            "embedding.weight",
            "lm_head.weight",
            *{f"layers.{i}.conv1d.weight" for i in range(config.n_layers)},
        }

    def test_w8_all_vs_mlp_differ_only_outside_projections(self):
        model = toy_model(seed=3)
        m_mlp, _ = quantize_model_weights(model, 8, "mlp")
        m_all, _ = quantize_model_weights(model, 8, "all")
        t_mlp, t_all = model_tensors(m_mlp), model_tensors(m_all)
        diff = {n for n in t_mlp if not np.array_equal(t_mlp[n], t_all[n])}
        assert diff <= set(scoped_weight_names(model.config, "all")) - set(
            scoped_weight_names(model.config, "mlp")
        )

    def test_excluded_tensors_stay_f32(self):
        model = toy_model(seed=3)
        m_all, quantized = quantize_model_weights(model, 8, "all")
        for i, lw in enumerate(m_all.layers):
            assert np.array_equal(lw.A_log, model.layers[i].A_log)
            assert np.array_equal(lw.D, model.layers[i].D)
            assert np.array_equal(lw.dt_proj_bias, model.layers[i].dt_proj_bias)
            assert np.array_equal(lw.norm_weight, model.layers[i].norm_weight)
        assert not any(name.endswith((".bias", "A_log", ".D", "norm.weight")) for name in quantized)

    def test_policy_never_quantizes_ssm_out(self):
        model = toy_model(seed=4)
        corpus = _corpus(model)
        stats = calibrate_model(model, corpus.calibration)
        for cfg in [
            QuantConfig(wbits=8, abits=8, scope="mlp"),
            QuantConfig(wbits=8, abits=8, scope="all", smooth_alpha=0.5),
            QuantConfig(wbits=4, abits=8, scope="all", ablate_outliers=True),
        ]:
            _, hooks = build_hooks(cfg, model, stats)
            for (layer, tap), hook_list in hooks.items():
                kinds = {h.kind for h in hook_list}
                if "fake_quant" in kinds:
                    assert tap in QUANTIZABLE_TAPS
                assert tap != TapPoint.SSM_OUT or "fake_quant" not in kinds

    def test_needs_stats_enforced(self):
        model = toy_model(seed=4)
        with pytest.raises(ConfigError):
            build_hooks(QuantConfig(wbits=8, abits=8), model, None)


class TestEvaluateFidelity:
    def test_self_comparison_is_perfect(self):
        model = toy_model(seed=5)
        corpus = _corpus(model)
        rep = evaluate_fidelity(model, model, corpus.evaluation)
        assert rep.mse == 0.0 and rep.cosine == 1.0
        assert rep.top1_agreement == 1.0 and rep.max_abs == 0.0
        for row in rep.per_layer:
            assert row["mse"] == 0.0 and row["cosine"] == 1.0

    def test_w8_mlp_high_cosine(self):
        model = toy_model(seed=6, d_model=24)
        corpus = _corpus(model)
        rep = evaluate_fidelity(model, prepare(QuantConfig(wbits=8), model), corpus.evaluation)
        assert rep.cosine >= 0.99

    def test_w4_worse_than_w8(self):
        model = toy_model(seed=7, d_model=24)
        corpus = _corpus(model)
        r8 = evaluate_fidelity(model, prepare(QuantConfig(wbits=8), model), corpus.evaluation)
        r4 = evaluate_fidelity(model, prepare(QuantConfig(wbits=4), model), corpus.evaluation)
        assert r4.mse > r8.mse

    def test_empty_corpus(self):
        model = toy_model(seed=5)
        with pytest.raises(DataError):
            evaluate_fidelity(model, model, [])

    def test_report_dict_shape(self):
        model = toy_model(seed=5)
        corpus = _corpus(model)
        rep = evaluate_fidelity(model, model, corpus.evaluation, config=QuantConfig(wbits=8))
        d = rep.to_dict()
        assert d["config"] == "W8" and d["scope"] == "mlp"
        assert set(d["metrics"]) == {"mse", "cosine", "max_abs", "top1_agreement"}
        assert "runtime" not in d and "runtime_s" not in d


class TestMakeOutlierModel:
    def test_magnitude_one_no_injected_outliers(self):
        model = outlier_model([3, 7], magnitude=1.0, seed=8, d_model=32)
        corpus = _corpus(model)
        stats = calibrate_model(model, corpus.calibration)
        rep = detect_outliers(stats[(0, TapPoint.IN_PROJ_OUT)], 6.0)
        assert not set(rep.outlier_channels) >= {3, 7}

    def test_detector_recovers_injected_set(self):
        model = outlier_model([5], magnitude=50.0, seed=9, d_model=64)
        corpus = _corpus(model)
        stats = calibrate_model(model, corpus.calibration)
        for layer in range(model.config.n_layers):
            rep = detect_outliers(stats[(layer, TapPoint.IN_PROJ_OUT)], 6.0)
            assert rep.outlier_channels == [5]

    def test_same_seed_identical(self):
        a = outlier_model([1], seed=10)
        b = outlier_model([1], seed=10)
        ta, tb = model_tensors(a), model_tensors(b)
        assert all(np.array_equal(ta[k], tb[k]) for k in ta)

    def test_index_range_checked(self):
        with pytest.raises(DataError):
            outlier_model([toy_config().d_inner])


class TestSmoothingBenefit:
    def test_single_seed_w8a8(self):
        model = outlier_model([4], magnitude=50.0, seed=11, d_model=32)
        corpus = _corpus(model, n_tokens=2048, seq_len=64)
        stats = calibrate_model(model, corpus.calibration)
        naive = prepare(QuantConfig(wbits=8, abits=8), model, stats)
        smooth = prepare(QuantConfig(wbits=8, abits=8, smooth_alpha=0.5), model, stats)
        r_naive = evaluate_fidelity(model, naive, corpus.evaluation)
        r_smooth = evaluate_fidelity(model, smooth, corpus.evaluation)
        assert r_smooth.mse < r_naive.mse
        assert r_smooth.smoothing is None and smooth.factors is not None

    def test_smoothed_report_carries_factors(self):
        model = outlier_model([4], seed=11, d_model=32)
        corpus = _corpus(model)
        reports = run_grid(model, corpus, [QuantConfig(wbits=8, abits=8, smooth_alpha=0.5)])
        d = reports[0].to_dict()
        assert "smoothing" in d and len(d["smoothing"]) == 4 * model.config.n_layers
        assert all(len(f["s"]) > 0 for f in d["smoothing"])


class TestRunGrid:
    def test_table_one_shape(self):
        model = toy_model(seed=12, d_model=24)
        corpus = _corpus(model)
        cells = [
            QuantConfig(),
            QuantConfig(wbits=8, scope="mlp"),
            QuantConfig(wbits=8, scope="all"),
            QuantConfig(wbits=4, scope="mlp"),
            QuantConfig(wbits=4, scope="all"),
            QuantConfig(wbits=8, abits=8, scope="mlp"),
            QuantConfig(wbits=8, abits=8, scope="all"),
        ]
        reports = run_grid(model, corpus, cells)
        assert [r.config.notation for r in reports] == ["fp", "W8", "W8", "W4", "W4", "W8A8", "W8A8"]
        assert reports[0].mse == 0.0 and reports[0].cosine == 1.0
        assert reports[0].top1_agreement == 1.0

    def test_empty_grid(self):
        model = toy_model(seed=12)
        corpus = _corpus(model)
        assert run_grid(model, corpus, []) == []

    def test_parallel_matches_serial(self, monkeypatch):
        model = toy_model(seed=13, d_model=24)
        corpus = _corpus(model)
        cells = [QuantConfig(wbits=8), QuantConfig(wbits=4), QuantConfig(wbits=8, abits=8)]
        serial = run_grid(model, corpus, cells)
        monkeypatch.setenv("SSM_PTQ_THREADS", "3")
        parallel = run_grid(model, corpus, cells)
        for a, b in zip(serial, parallel):
            assert a.mse == b.mse and a.cosine == b.cosine


class TestQuantizedArchives:
    def test_round_trip_bitwise_logits(self, tmp_path):
        model = outlier_model([2], seed=14, d_model=32)
        corpus = _corpus(model, n_tokens=2048, seq_len=64)
        stats = calibrate_model(model, corpus.calibration)
        p = prepare(QuantConfig(wbits=8, abits=8, smooth_alpha=0.5), model, stats)
        path = tmp_path / "q.sptq"
        save_quantized_model(p, path)
        loaded_model, hooks, qcfg = load_eval_model(path, model.config)
        assert qcfg.wbits == 8 and qcfg.abits == 8 and qcfg.scope == "mlp"
        ids = corpus.evaluation[0]
        want = model_forward(p.model, ids, p.hooks)
        got = model_forward(loaded_model, ids, hooks)
        assert np.array_equal(got, want)

    def test_w4_archive_uses_i4(self, tmp_path):
        from ssm_ptq.archive import load_archive

        model = toy_model(seed=15)
        p = prepare(QuantConfig(wbits=4, scope="all"), model)
        save_quantized_model(p, tmp_path / "q4.sptq")
        tensors = load_archive(tmp_path / "q4.sptq")
        assert tensors["embedding.weight"].dtype == "i4"
        assert tensors["embedding.weight.scale"].dtype == "f32"
        assert infer_quant_config(tensors) == QuantConfig(wbits=4, scope="all")

    def test_plain_archive_infers_fp(self, tmp_path):
        from ssm_ptq.archive import load_archive
        from ssm_ptq.model import save_model

        model = toy_model(seed=15)
        save_model(model, tmp_path / "m.sptq")
        assert infer_quant_config(load_archive(tmp_path / "m.sptq")) == QuantConfig()
