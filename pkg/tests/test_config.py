import pytest

from crowdrank.config import (
    RunConfig,
    build_encoders,
    config_from_dict,
    inference_config,
    load_config,
    ranking_spec,
    run_config_hash,
    train_config,
)
from crowdrank.data import DatasetManifest
from crowdrank.errors import ConfigError


class TestLoading:
    def test_defaults_match_standard_recipe(self):
        cfg = RunConfig()
        tcfg = train_config(cfg)
        assert (tcfg.m, tcfg.ranking.n) == (6, 6)
        assert tcfg.ranking.r0 == 20 and tcfg.ranking.k == 35
        assert tcfg.learning_rate == 1e-4
        assert tcfg.epochs == 100
        assert tcfg.freeze_text is True and tcfg.freeze_image is False

    def test_yaml_file(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("seed: 9\ntraining:\n  epochs: 5\nprompts:\n  k: 30\n")
        cfg = load_config(path)
        assert cfg.seed == 9
        assert cfg.training.epochs == 5
        assert ranking_spec(cfg).counts == (20, 50, 80, 110, 140, 170)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.yaml")

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"trainning": {}})
        with pytest.raises(ConfigError):
            config_from_dict({"training": {"epoch": 3}})

    def test_override_precedence(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("training:\n  epochs: 5\n")
        cfg = load_config(path, overrides=["training.epochs=7", "seed=3"])
        assert cfg.training.epochs == 7
        assert cfg.seed == 3

    def test_override_types_parsed(self):
        cfg = load_config(None, overrides=["training.learning_rate=1e-3",
                                           "training.freeze_image=true"])
        assert cfg.training.learning_rate == 1e-3
        assert cfg.training.freeze_image is True

    def test_bad_override(self):
        with pytest.raises(ConfigError):
            load_config(None, overrides=["no_equals_sign"])

    def test_hash_is_stable_and_sensitive(self):
        a = run_config_hash(RunConfig())
        b = run_config_hash(RunConfig())
        assert a == b
        c = load_config(None, overrides=["seed=1"])
        assert run_config_hash(c) != a


class TestInferenceConfigResolution:
    def test_dataset_policy_flows_through(self):
        manifest = DatasetManifest(name="qnrf-mini", default_p=4, resize_max_long=2048)
        icfg = inference_config(RunConfig(), manifest=manifest)
        assert icfg.grid.p == 4
        assert icfg.resize_max_long == 2048

    def test_explicit_p_wins(self):
        manifest = DatasetManifest(name="qnrf-mini", default_p=4, resize_max_long=2048)
        icfg = inference_config(RunConfig(), manifest=manifest, p=5)
        assert icfg.grid.p == 5

    def test_config_p_beats_policy(self):
        cfg = load_config(None, overrides=["inference.p=2", "inference.resize_max_long=999"])
        manifest = DatasetManifest(name="qnrf-mini", default_p=4, resize_max_long=2048)
        icfg = inference_config(cfg, manifest=manifest)
        assert icfg.grid.p == 2
        assert icfg.resize_max_long == 999

    def test_without_manifest(self):
        icfg = inference_config(RunConfig())
        assert icfg.grid.p == 3
        assert icfg.resize_max_long is None

    def test_prompt_wiring(self):
        icfg = inference_config(RunConfig())
        assert icfg.coarse_prompts.texts[0] == "The object is crowd"
        assert icfg.fine_prompts.texts[0] == "The objects are human heads"
        assert icfg.ranking_prompts.counts == (20, 55, 90, 125, 160, 195)


class TestEncoderBuilders:
    def test_mock_triple_is_independent(self):
        enc_o, enc_f, text = build_encoders(RunConfig())
        assert enc_o is not enc_f
        assert enc_o.backend == "mock" and not enc_o.trainable

    def test_tiny_backend(self):
        cfg = load_config(None, overrides=["encoder.backend=tiny"])
        enc_o, enc_f, text = build_encoders(cfg)
        assert enc_f.trainable and enc_f.module is not None
        assert not enc_o.trainable

    def test_unknown_backend(self):
        cfg = load_config(None, overrides=["encoder.backend=quantum"])
        with pytest.raises(ConfigError):
            build_encoders(cfg)
