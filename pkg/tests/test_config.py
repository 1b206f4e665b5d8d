import pytest

from anomcast.config import RunConfig, format_config, parse_config_text
from anomcast.errors import ConfigError


class TestParsing:
    def test_defaults_when_empty(self):
        cfg = parse_config_text("")
        assert cfg == RunConfig()

    def test_key_value_with_comments(self):
        cfg = parse_config_text("# a run\nseed = 9\nhidden_size = 8\ndsa_self_loop = false\n")
        assert cfg.seed == 9
        assert cfg.hidden_size == 8
        assert cfg.dsa_self_loop is False

    def test_float_list(self):
        cfg = parse_config_text("eta = 0.1, 0.2, 0.3, 0.4\nbase_rate = 1.5\n")
        assert cfg.eta == (0.1, 0.2, 0.3, 0.4)
        assert cfg.base_rate == (1.5,)

    def test_categories_list(self):
        cfg = parse_config_text("n_categories = 2\ncategories = burglary, robbery\n")
        assert cfg.category_names() == ("burglary", "robbery")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text("hiden_size = 8\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("seed = 1\nseed = 2\n")

    def test_bad_int_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("epochs = soon\n")

    def test_bad_bool_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("dsa_self_loop = maybe\n")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_text("seed 5\n")

    def test_line_number_in_error(self):
        with pytest.raises(ConfigError, match=":3"):
            parse_config_text("seed = 1\n# fine\nbogus = 2\n")


class TestRoundTrip:
    def test_format_parse_identity(self):
        cfg = RunConfig(seed=5, hidden_size=8, eta=(0.1, 0.2, 0.3, 0.4),
                        ablation="-MSA", dsa_self_loop=False, lr0=0.0025)
        again = parse_config_text(format_config(cfg))
        assert again == cfg

    def test_category_name_count_checked(self):
        cfg = parse_config_text("n_categories = 3\ncategories = a, b\n")
        with pytest.raises(ConfigError):
            cfg.category_names()


class TestDerived:
    def test_train_config_mapping(self):
        cfg = parse_config_text("t_window = 12\nhidden_size = 8\nlambda_c = 0.5\ntau = 0.3\n")
        tc = cfg.train_config()
        assert tc.t_window == 12
        assert tc.d == 8
        assert tc.loss.lambda_c == 0.5
        assert tc.loss.tau == 0.3

    def test_synth_config_broadcasts_single_rate(self):
        cfg = parse_config_text("n_categories = 3\nbase_rate = 1.5\n")
        sc = cfg.synth_config()
        assert sc.base_rate == (1.5, 1.5, 1.5)

    def test_bad_start_time(self):
        cfg = parse_config_text("start_time = yesterday\n")
        with pytest.raises(ConfigError):
            cfg.t0()
