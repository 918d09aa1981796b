import pytest

from microau.config import KEY_SPECS, parse_config_text, resolve
from microau.errors import ConfigurationError


class TestParsing:
    def test_defaults_resolve(self):
        cfg = resolve()
        assert cfg["batch_size"] == 32
        assert cfg["epochs"] == 30
        assert cfg["seed"] == 7
        assert cfg["weight_decay"] == 0.005
        assert cfg["asl.gamma_neg"] == 4.0
        assert cfg["gen.subjects"] == 12 and cfg["gen.per_subject"] == 30

    def test_file_and_overrides_precedence(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("epochs = 5  # quick run\n\n# comment line\nseed=99\n")
        cfg = resolve(str(f), {"seed": "123"})
        assert cfg["epochs"] == 5
        assert cfg["seed"] == 123

    def test_unknown_key_rejected(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("learning_rt = 0.1\n")
        with pytest.raises(ConfigurationError, match="unknown key"):
            resolve(str(f))
        with pytest.raises(ConfigurationError, match="unknown config key"):
            resolve(overrides={"nope": "1"})

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigurationError):
            resolve(overrides={"epochs": "many"})
        with pytest.raises(ConfigurationError):
            resolve(overrides={"efp.variant": "gigantic"})

    def test_malformed_line(self):
        with pytest.raises(ConfigurationError, match="key=value"):
            parse_config_text("epochs 5\n")

    def test_echo_is_sorted_and_complete(self):
        cfg = resolve(overrides={"epochs": "3"})
        lines = cfg.echo().strip().splitlines()
        assert lines == sorted(lines)
        assert len(lines) == len(KEY_SPECS)
        assert "epochs=3" in lines

    def test_echo_round_trips_through_parser(self):
        cfg = resolve(overrides={"learning_rate": "0.5", "gen.weights": "4:3.0"})
        parsed = parse_config_text(cfg.echo())
        cfg2 = resolve(overrides=parsed)
        assert cfg2.raw == cfg.raw


class TestTypedViews:
    def test_au_set_parse(self):
        cfg = resolve(overrides={"gen.au_set": "12, 4,2"})
        assert cfg.gen_au_set() == (2, 4, 12)
        with pytest.raises(ConfigurationError):
            resolve(overrides={"gen.au_set": "two"}).gen_au_set()

    def test_weights_parse(self):
        cfg = resolve(overrides={"gen.weights": "4:3.0,12:1.5"})
        assert cfg.gen_weights() == {4: 3.0, 12: 1.5}
        assert resolve().gen_weights() is None
        with pytest.raises(ConfigurationError):
            resolve(overrides={"gen.weights": "4=3"}).gen_weights()

    def test_subconfig_builders(self):
        cfg = resolve(overrides={"backbone.conv1_channels": "4",
                                 "reasoner.prompt_mode": "learnable_text"})
        assert cfg.backbone_config().conv1_channels == 4
        assert cfg.reasoner_config(8).n_aus == 8
        assert cfg.reasoner_config(8).prompt_mode == "learnable_text"
        assert cfg.led_config().r1_init == 0.4
        assert cfg.efp_config().variant == "full_mlp"
        assert cfg.asl_config().margin == 0.05
